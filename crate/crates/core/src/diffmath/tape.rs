//! Reverse-mode gradient recording.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append nodes in execution order, so walking the node list backwards is a
//! valid reverse topological order and each node is visited exactly once.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::Matrix3;

use super::knn::KnnIndices;
use super::scalar::{huber, huber_grad, softplus, sigmoid};
use super::svd::{rotation_backward, rotation_from_svd, svd3};
use super::Tensor;
use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    grad: Option<Tensor>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn require_matrix(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    if a.rank() != 2 {
        return Err(Error::shape(op, format!("expected rank 2, got {:?}", a.shape())));
    }
    Ok((a.rows(), a.cols()))
}

fn check_indices(op: &'static str, idx: &[usize], extent: usize) -> Result<()> {
    match idx.iter().find(|&&i| i >= extent) {
        Some(&index) => Err(Error::IndexOutOfRange { op, index, extent }),
        None => Ok(()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, value: Tensor, requires_grad: bool, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents,
            backward,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    /// A value gradients are taken with respect to.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.insert(value, true, vec![], None)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.insert(value, false, vec![], None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.insert((*value).clone(), false, vec![], None)
    }

    fn record(
        &self,
        op: &'static str,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        Ok(self.insert(
            value,
            requires_grad,
            parents.iter().map(|p| p.0).collect(),
            backward,
        ))
    }

    /// Runs the backward pass from a one-element `root`. Gradients of earlier
    /// passes on this tape are discarded.
    pub fn backward(&self, root: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[root.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got {:?}", nodes[root.0].value.shape()),
            ));
        }
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        let shape = nodes[root.0].value.shape().to_vec();
        nodes[root.0].grad = Some(Tensor::full(&shape, 1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = nodes[id].grad.take() else {
                continue;
            };
            if let Some(bw) = &nodes[id].backward {
                let needs: Vec<bool> = nodes[id]
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect();
                let pgrads = bw(&g, &needs);
                let parents = nodes[id].parents.clone();
                for ((p, pg), need) in parents.into_iter().zip(pgrads).zip(needs) {
                    let Some(pg) = pg else { continue };
                    if !need {
                        continue;
                    }
                    match &mut nodes[p].grad {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            nodes[id].grad = Some(g);
        }
        Ok(())
    }

    /// Gradient accumulated into `v` by the last [`Tape::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", &va, &vb)?;
        let out = va.zip_map(&vb, |x, y| x + y);
        self.record("add", out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", &va, &vb)?;
        let out = va.zip_map(&vb, |x, y| x - y);
        self.record("sub", out, &[a, b], |g, _| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", &va, &vb)?;
        let out = va.zip_map(&vb, |x, y| x * y);
        self.record("mul", out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&vb, |x, y| x * y)),
                need[1].then(|| g.zip_map(&va, |x, y| x * y)),
            ]
        })
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.record("scale", out, &[a], move |g, _| vec![Some(g.map(|x| x * c))])
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_const(&self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.record("add_const", out, &[a], |g, _| vec![Some(g.clone())])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = va.map(|x| x.max(0.0));
        self.record("relu", out, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |g, x| if x > 0.0 { g } else { 0.0 }))]
        })
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let out = Rc::new(self.value(a).map(f64::exp));
        let y = Rc::clone(&out);
        self.record("exp", (*out).clone(), &[a], move |g, _| {
            vec![Some(g.zip_map(&y, |g, y| g * y))]
        })
    }

    /// `ln(max(x, floor))`; entries below the floor get zero gradient.
    pub fn ln_floor(&self, a: Var, floor: f64) -> Result<Var> {
        let va = self.value(a);
        let out = va.map(|x| x.max(floor).ln());
        self.record("ln", out, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |g, x| if x >= floor { g / x } else { 0.0 }))]
        })
    }

    /// Square root; the derivative at zero is taken at `1e-12` instead.
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.data().iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidInput("sqrt of a negative value".into()));
        }
        let out = Rc::new(va.map(f64::sqrt));
        let y = Rc::clone(&out);
        self.record("sqrt", (*out).clone(), &[a], move |g, _| {
            vec![Some(g.zip_map(&y, |g, y| 0.5 * g / y.max(1e-12)))]
        })
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = va.map(|x| x * x);
        self.record("square", out, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |g, x| 2.0 * g * x))]
        })
    }

    pub fn recip(&self, a: Var) -> Result<Var> {
        let out = Rc::new(self.value(a).map(|x| 1.0 / x));
        let y = Rc::clone(&out);
        self.record("recip", (*out).clone(), &[a], move |g, _| {
            vec![Some(g.zip_map(&y, |g, y| -g * y * y))]
        })
    }

    pub fn softplus(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = va.map(softplus);
        self.record("softplus", out, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |g, x| g * sigmoid(x)))]
        })
    }

    /// Elementwise Huber penalty of non-negative inputs.
    pub fn huber(&self, a: Var, delta: f64) -> Result<Var> {
        let va = self.value(a);
        let mut out = Vec::with_capacity(va.numel());
        for &x in va.data() {
            out.push(huber(x, delta)?);
        }
        let out = Tensor::from_vec(va.shape().to_vec(), out)?;
        self.record("huber", out, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |g, x| g * huber_grad(x, delta)))]
        })
    }

    // ---- broadcasting --------------------------------------------------

    /// `x (n x c) + b (1 x c)` on every row.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let (n, c) = require_matrix("add_row", &vx)?;
        if vb.numel() != c {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", vx.shape(), vb.shape())));
        }
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let bshape = vb.shape().to_vec();
        self.record("add_row", out, &[x, b], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; c];
                for row in g.data().chunks_exact(c) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                let _ = n;
                Tensor::from_vec(bshape.clone(), acc).expect("bias shape")
            });
            vec![Some(g.clone()), gb]
        })
    }

    pub fn sub_row(&self, x: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add_row(x, nb)
    }

    /// `x (n x c)` with row `i` scaled by `v[i]` (`v` is `n x 1`).
    pub fn mul_col(&self, x: Var, v: Var) -> Result<Var> {
        let (vx, vv) = (self.value(x), self.value(v));
        let (n, c) = require_matrix("mul_col", &vx)?;
        if vv.numel() != n {
            return Err(Error::shape("mul_col", format!("{:?} * {:?}", vx.shape(), vv.shape())));
        }
        let mut out = (*vx).clone();
        for (row, s) in out.data_mut().chunks_exact_mut(c).zip(vv.data()) {
            row.iter_mut().for_each(|o| *o *= s);
        }
        let vshape = vv.shape().to_vec();
        self.record("mul_col", out, &[x, v], move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                for (row, s) in gx.data_mut().chunks_exact_mut(c).zip(vv.data()) {
                    row.iter_mut().for_each(|o| *o *= s);
                }
                gx
            });
            let gv = need[1].then(|| {
                let d = g
                    .data()
                    .chunks_exact(c)
                    .zip(vx.data().chunks_exact(c))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::from_vec(vshape.clone(), d).expect("column shape")
            });
            vec![gx, gv]
        })
    }

    /// Every entry of `x` times the one-element `s`.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.numel() != 1 {
            return Err(Error::shape("mul_scalar", format!("{:?}", vs.shape())));
        }
        let sv = vs.item();
        let out = vx.map(|v| v * sv);
        let sshape = vs.shape().to_vec();
        self.record("mul_scalar", out, &[x, s], move |g, need| {
            vec![
                need[0].then(|| g.map(|v| v * sv)),
                need[1].then(|| {
                    let d = g.data().iter().zip(vx.data()).map(|(a, b)| a * b).sum();
                    Tensor::from_vec(sshape.clone(), vec![d]).expect("scalar")
                }),
            ]
        })
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        self.record("sum", Tensor::scalar(va.sum()), &[a], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::InvalidInput("mean of an empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum along `axis` of a matrix: axis 0 gives `1 x c`, axis 1 gives `n x 1`.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let (n, c) = require_matrix("sum_axis", &va)?;
        match axis {
            0 => {
                let mut acc = vec![0.0; c];
                for row in va.data().chunks_exact(c) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                self.record("sum_axis", Tensor::matrix(1, c, acc)?, &[a], move |g, _| {
                    let mut out = Vec::with_capacity(n * c);
                    for _ in 0..n {
                        out.extend_from_slice(g.data());
                    }
                    vec![Some(Tensor::matrix(n, c, out).expect("shape"))]
                })
            }
            1 => {
                let acc = va.data().chunks_exact(c).map(|r| r.iter().sum()).collect();
                self.record("sum_axis", Tensor::matrix(n, 1, acc)?, &[a], move |g, _| {
                    let out = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect();
                    vec![Some(Tensor::matrix(n, c, out).expect("shape"))]
                })
            }
            _ => Err(Error::InvalidInput(format!("sum_axis: axis {axis} out of range"))),
        }
    }

    /// Column-wise maximum over rows (`n x c -> 1 x c`); ties go to the first row.
    pub fn max_rows(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (n, c) = require_matrix("max_rows", &va)?;
        if n == 0 {
            return Err(Error::InvalidInput("max_rows of an empty matrix".into()));
        }
        let mut best = va.row(0).to_vec();
        let mut arg = vec![0usize; c];
        for r in 1..n {
            for (j, &v) in va.row(r).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    arg[j] = r;
                }
            }
        }
        self.record("max_rows", Tensor::matrix(1, c, best)?, &[a], move |g, _| {
            let mut out = Tensor::zeros(&[n, c]);
            for (j, &r) in arg.iter().enumerate() {
                out.data_mut()[r * c + j] = g.data()[j];
            }
            vec![Some(out)]
        })
    }

    // ---- structure -----------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.matmul(&vb)?;
        self.record("matmul", out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.matmul_t(&vb).expect("matmul grad")),
                need[1].then(|| va.t_matmul(g).expect("matmul grad")),
            ]
        })
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        require_matrix("transpose", &va)?;
        self.record("transpose", va.transpose(), &[a], |g, _| vec![Some(g.transpose())])
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        let old = va.shape().to_vec();
        let out = (*va).clone().reshape(shape)?;
        self.record("reshape", out, &[a], move |g, _| {
            vec![Some(g.clone().reshape(old.clone()).expect("same size"))]
        })
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let n = vals.first().map(|v| v.rows()).unwrap_or(0);
        for v in &vals {
            require_matrix("concat_cols", v)?;
            if v.rows() != n {
                return Err(Error::shape("concat_cols", format!("row counts differ: {:?}", v.shape())));
            }
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        self.record("concat_cols", Tensor::matrix(n, total, out)?, parts, move |g, need| {
            let mut offset = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &nd)| {
                    let start = offset;
                    offset += w;
                    nd.then(|| {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.row(r)[start..start + w]);
                        }
                        Tensor::matrix(n, w, d).expect("block")
                    })
                })
                .collect()
        })
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let c = vals.first().map(|v| v.cols()).unwrap_or(0);
        for v in &vals {
            require_matrix("concat_rows", v)?;
            if v.cols() != c {
                return Err(Error::shape("concat_rows", format!("column counts differ: {:?}", v.shape())));
            }
        }
        let heights: Vec<usize> = vals.iter().map(|v| v.rows()).collect();
        let data: Vec<f64> = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
        let total = heights.iter().sum();
        self.record("concat_rows", Tensor::matrix(total, c, data)?, parts, move |g, need| {
            let mut offset = 0;
            heights
                .iter()
                .zip(need)
                .map(|(&h, &nd)| {
                    let start = offset;
                    offset += h;
                    nd.then(|| {
                        Tensor::matrix(h, c, g.data()[start * c..(start + h) * c].to_vec()).expect("block")
                    })
                })
                .collect()
        })
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        let (n, c) = require_matrix("slice_rows", &va)?;
        if start > end || end > n {
            return Err(Error::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                extent: n,
            });
        }
        let out = Tensor::matrix(end - start, c, va.data()[start * c..end * c].to_vec())?;
        self.record("slice_rows", out, &[a], move |g, _| {
            let mut full = Tensor::zeros(&[n, c]);
            full.data_mut()[start * c..end * c].copy_from_slice(g.data());
            vec![Some(full)]
        })
    }

    /// Output row `r` is input row `idx[r]`; the gradient scatters additively.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let (n, c) = require_matrix("gather_rows", &va)?;
        check_indices("gather_rows", idx, n)?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(va.row(i));
        }
        let idx = idx.to_vec();
        self.record("gather_rows", Tensor::matrix(idx.len(), c, out)?, &[a], move |g, _| {
            let mut acc = Tensor::zeros(&[n, c]);
            let d = acc.data_mut();
            for (r, &i) in idx.iter().enumerate() {
                for (o, v) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            vec![Some(acc)]
        })
    }

    /// `out[i] = x[i, cols[i]]` as an `n x 1` column.
    pub fn pick_per_row(&self, a: Var, cols: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let (n, c) = require_matrix("pick_per_row", &va)?;
        if cols.len() != n {
            return Err(Error::shape("pick_per_row", format!("{} indices for {n} rows", cols.len())));
        }
        check_indices("pick_per_row", cols, c)?;
        let out = cols.iter().enumerate().map(|(i, &j)| va.get(i, j)).collect();
        let cols = cols.to_vec();
        self.record("pick_per_row", Tensor::matrix(n, 1, out)?, &[a], move |g, _| {
            let mut acc = Tensor::zeros(&[n, c]);
            for (i, &j) in cols.iter().enumerate() {
                acc.data_mut()[i * c + j] = g.data()[i];
            }
            vec![Some(acc)]
        })
    }

    // ---- normalisations ------------------------------------------------

    /// Numerically stable softmax along `axis` of a tensor of any rank.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidInput(format!(
                "softmax: axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0; va.numel()];
        let x = va.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let y = Rc::new(Tensor::from_vec(shape.clone(), out)?);
        let yc = Rc::clone(&y);
        self.record("softmax", (*y).clone(), &[a], move |g, _| {
            let (gd, yd) = (g.data(), yc.data());
            let mut gx = vec![0.0; gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| gd[at(j)] * yd[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_vec(shape.clone(), gx).expect("shape"))]
        })
    }

    /// Divides every row by its sum. Rows must have positive sums.
    pub fn row_normalize(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (n, c) = require_matrix("row_normalize", &va)?;
        let sums: Vec<f64> = va.data().chunks_exact(c).map(|r| r.iter().sum()).collect();
        if sums.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput("row_normalize needs positive row sums".into()));
        }
        let mut y = (*va).clone();
        for (row, s) in y.data_mut().chunks_exact_mut(c).zip(&sums) {
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y = Rc::new(y);
        let yc = Rc::clone(&y);
        self.record("row_normalize", (*y).clone(), &[a], move |g, _| {
            let mut gx = Tensor::zeros(&[n, c]);
            for r in 0..n {
                let (gr, yr) = (g.row(r), yc.row(r));
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx.data_mut()[r * c + j] = (gr[j] - dot) / sums[r];
                }
            }
            vec![Some(gx)]
        })
    }

    /// Soft minimum of each row, `-(1/s) ln Σ_j exp(-s x_ij)`, as `n x 1`.
    pub fn softmin_rows(&self, a: Var, sharpness: f64) -> Result<Var> {
        if !(sharpness > 0.0) {
            return Err(Error::InvalidInput("softmin sharpness must be > 0".into()));
        }
        let va = self.value(a);
        let (n, c) = require_matrix("softmin_rows", &va)?;
        let mut out = Vec::with_capacity(n);
        let mut weights = vec![0.0; n * c];
        for r in 0..n {
            let row = va.row(r);
            let m = row.iter().copied().fold(f64::INFINITY, f64::min);
            let w = &mut weights[r * c..(r + 1) * c];
            let mut z = 0.0;
            for (wj, &x) in w.iter_mut().zip(row) {
                *wj = (-sharpness * (x - m)).exp();
                z += *wj;
            }
            w.iter_mut().for_each(|v| *v /= z);
            out.push(m - z.ln() / sharpness);
        }
        self.record("softmin_rows", Tensor::matrix(n, 1, out)?, &[a], move |g, _| {
            let mut gx = weights.clone();
            for (row, gv) in gx.chunks_exact_mut(c).zip(g.data()) {
                row.iter_mut().for_each(|v| *v *= gv);
            }
            vec![Some(Tensor::matrix(n, c, gx).expect("shape"))]
        })
    }

    // ---- geometry-flavoured kernels ------------------------------------

    /// `out[i, j] = ‖a_i − b_j‖²`.
    pub fn pairwise_sqdist(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, d) = require_matrix("pairwise_sqdist", &va)?;
        let (m, d2) = require_matrix("pairwise_sqdist", &vb)?;
        if d != d2 {
            return Err(Error::shape("pairwise_sqdist", format!("dim {d} vs {d2}")));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = va.row(i);
            for j in 0..m {
                out[i * m + j] = ai
                    .iter()
                    .zip(vb.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        self.record("pairwise_sqdist", Tensor::matrix(n, m, out)?, &[a, b], move |g, need| {
            let mut ga = need[0].then(|| Tensor::zeros(&[n, d]));
            let mut gb = need[1].then(|| Tensor::zeros(&[m, d]));
            for i in 0..n {
                let ai = va.row(i);
                for j in 0..m {
                    let gij = 2.0 * g.data()[i * m + j];
                    if gij == 0.0 {
                        continue;
                    }
                    let bj = vb.row(j);
                    for k in 0..d {
                        let diff = gij * (ai[k] - bj[k]);
                        if let Some(ga) = ga.as_mut() {
                            ga.data_mut()[i * d + k] += diff;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb.data_mut()[j * d + k] -= diff;
                        }
                    }
                }
            }
            vec![ga, gb]
        })
    }

    /// Max-aggregated edge response
    /// `out[i, c] = max_a relu(center[i, c] + nbr[idx[i, a], c])`.
    ///
    /// With `center = x (W_s − W_n) + b` and `nbr = x W_n` this equals the
    /// shared affine map of `concat(x_i, x_j − x_i)` followed by ReLU and a
    /// max over the neighbourhood, without materialising per-edge features.
    pub fn edge_max(&self, center: Var, nbr: Var, idx: &KnnIndices) -> Result<Var> {
        let (vc, vn) = (self.value(center), self.value(nbr));
        same_shape("edge_max", &vc, &vn)?;
        let (n, c) = require_matrix("edge_max", &vc)?;
        if idx.rows() != n {
            return Err(Error::shape("edge_max", format!("{} neighbour rows for {n} points", idx.rows())));
        }
        check_indices("edge_max", &idx.indices, n)?;
        let mut out = vec![0.0; n * c];
        // usize::MAX marks an inactive (all non-positive) output.
        let mut arg = vec![usize::MAX; n * c];
        for i in 0..n {
            let crow = vc.row(i);
            for &j in idx.row(i) {
                let nrow = vn.row(j);
                for ch in 0..c {
                    let v = crow[ch] + nrow[ch];
                    if v > out[i * c + ch] {
                        out[i * c + ch] = v;
                        arg[i * c + ch] = j;
                    }
                }
            }
        }
        self.record("edge_max", Tensor::matrix(n, c, out)?, &[center, nbr], move |g, need| {
            let mut gc = need[0].then(|| Tensor::zeros(&[n, c]));
            let mut gn = need[1].then(|| Tensor::zeros(&[n, c]));
            for (pos, &j) in arg.iter().enumerate() {
                if j == usize::MAX {
                    continue;
                }
                let gv = g.data()[pos];
                if let Some(gc) = gc.as_mut() {
                    gc.data_mut()[pos] += gv;
                }
                if let Some(gn) = gn.as_mut() {
                    gn.data_mut()[j * c + pos % c] += gv;
                }
            }
            vec![gc, gn]
        })
    }

    /// `out[r, j] = Σ_b x[r, idx[j, b]]`: sums each row over the column
    /// neighbourhood of every output column.
    pub fn gather_cols_sum(&self, a: Var, idx: &KnnIndices) -> Result<Var> {
        let va = self.value(a);
        let (r, m0) = require_matrix("gather_cols_sum", &va)?;
        check_indices("gather_cols_sum", &idx.indices, m0)?;
        let m = idx.rows();
        let mut out = vec![0.0; r * m];
        for row in 0..r {
            let x = va.row(row);
            for j in 0..m {
                out[row * m + j] = idx.row(j).iter().map(|&b| x[b]).sum();
            }
        }
        let idx = idx.clone();
        self.record("gather_cols_sum", Tensor::matrix(r, m, out)?, &[a], move |g, _| {
            let mut gx = Tensor::zeros(&[r, m0]);
            let d = gx.data_mut();
            for row in 0..r {
                let gr = g.row(row);
                for j in 0..m {
                    for &b in idx.row(j) {
                        d[row * m0 + b] += gr[j];
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Sums consecutive groups of `k` rows: `(n·k) x m -> n x m`.
    pub fn sum_row_groups(&self, a: Var, k: usize) -> Result<Var> {
        let va = self.value(a);
        let (nk, m) = require_matrix("sum_row_groups", &va)?;
        if k == 0 || nk % k != 0 {
            return Err(Error::shape("sum_row_groups", format!("{nk} rows in groups of {k}")));
        }
        let n = nk / k;
        let mut out = vec![0.0; n * m];
        for (r, row) in va.data().chunks_exact(m).enumerate() {
            let o = &mut out[(r / k) * m..(r / k + 1) * m];
            o.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        self.record("sum_row_groups", Tensor::matrix(n, m, out)?, &[a], move |g, _| {
            let mut gx = Vec::with_capacity(nk * m);
            for r in 0..nk {
                gx.extend_from_slice(g.row(r / k));
            }
            vec![Some(Tensor::matrix(nk, m, gx).expect("shape"))]
        })
    }

    /// Closest proper rotation to the cross-covariance `h` (3 x 3):
    /// `R = V diag(1, 1, det(V Uᵀ)) Uᵀ` where `h = U S Vᵀ`.
    ///
    /// With `stop_gradient` the rotation is treated as a constant.
    pub fn svd_rotation(&self, h: Var, stop_gradient: bool) -> Result<Var> {
        let vh = self.value(h);
        if vh.shape() != [3, 3] {
            return Err(Error::shape("svd_rotation", format!("{:?}", vh.shape())));
        }
        let hm = Matrix3::from_row_slice(vh.data());
        let svd = svd3(&hm);
        if svd.s[1] <= 1e-12 * svd.s[0].max(1e-300) {
            return Err(Error::Degenerate(format!(
                "cross-covariance rank < 2 (singular values {:?})",
                svd.s.as_slice()
            )));
        }
        let (r, d) = rotation_from_svd(&svd);
        let out = Tensor::matrix(3, 3, r.transpose().as_slice().to_vec())?;
        if stop_gradient {
            return Ok(self.constant(out));
        }
        self.record("svd_rotation", out, &[h], move |g, _| {
            let gm = Matrix3::from_row_slice(g.data());
            let gh = rotation_backward(&svd, d, &gm);
            vec![Some(Tensor::matrix(3, 3, gh.transpose().as_slice().to_vec()).expect("3x3"))]
        })
    }
}
