//! Dense f64 tensors with tape-free reverse-mode differentiation.
//!
//! Every op records its parents and a closure mapping the output gradient
//! to parent gradients. Nodes that do not depend on a trainable leaf keep
//! neither, so inference graphs cost no more than plain arrays.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use super::MicronetError;

type Result<T> = std::result::Result<T, MicronetError>;
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    op: &'static str,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MicronetError::NonFinite(op))
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> MicronetError {
    MicronetError::ShapeMismatch(format!("{op}: {a:?} vs {b:?}"))
}

/// `a (n x k) * b (k x m)`, row-major.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Sum that depends only on the multiset of terms: ascending total order.
pub(crate) fn ordered_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

pub(crate) fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

impl Tensor {
    fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(MicronetError::ShapeMismatch(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        check_finite("leaf", &data)?;
        Ok(Tensor(Rc::new(Node {
            shape: shape.to_vec(),
            data,
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
            op: "leaf",
        })))
    }

    /// A constant (no gradient is tracked through it).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, data, false)
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, data, true)
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Self::new(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::new(shape, vec![0.0; numel(shape)]).expect("zeros are finite")
    }

    fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Tensor> {
        debug_assert_eq!(numel(&shape), data.len());
        check_finite(op, &data)?;
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if requires_grad {
            (parents.iter().map(|&p| p.clone()).collect(), Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Ok(Tensor(Rc::new(Node {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
            op,
        })))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Rows and columns of a 2D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [n, m] => Ok((*n, *m)),
            s => Err(MicronetError::ShapeMismatch(format!("{op}: expected a matrix, got {s:?}"))),
        }
    }

    fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape() {
            [h, w, c] => Ok((*h, *w, *c)),
            s => Err(MicronetError::ShapeMismatch(format!("{op}: expected H x W x C, got {s:?}"))),
        }
    }

    /// Reverse-mode pass from this scalar. Gradients of every node reachable
    /// from it are reset first, then accumulated.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(MicronetError::NonScalarLoss(self.shape().to_vec()));
        }
        let order = self.topo_order();
        for t in &order {
            *t.0.grad.borrow_mut() = None;
        }
        *self.0.grad.borrow_mut() = Some(vec![1.0]);
        for t in order.iter().rev() {
            let Some(bw) = &t.0.backward else { continue };
            let Some(g) = t.0.grad.borrow().clone() else { continue };
            for (parent, pg) in t.0.parents.iter().zip(bw(&g)) {
                let Some(pg) = pg else { continue };
                if !parent.0.requires_grad {
                    continue;
                }
                let mut slot = parent.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    /// Parents-before-children order of the tracked graph under `self`.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut order = Vec::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if !seen.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        Self::from_op("reshape", shape.to_vec(), self.data().to_vec(), &[self], |g| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.dims2("matmul")?;
        let (k2, m) = other.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(), other.shape()));
        }
        let out = matmul_raw(self.data(), other.data(), n, k, m);
        let a = self.data().to_vec();
        let b = other.data().to_vec();
        let (ta, tb) = (self.requires_grad(), other.requires_grad());
        Self::from_op("matmul", vec![n, m], out, &[self, other], move |g| {
            let ga = ta.then(|| matmul_raw(g, &transpose_raw(&b, k, m), n, m, k));
            let gb = tb.then(|| matmul_raw(&transpose_raw(&a, n, k), g, k, n, m));
            vec![ga, gb]
        })
    }

/// [`Tensor::matmul`] whose inner-axis reduction is independent of the
    /// order of that axis: permuting the columns of `self` together with the
    /// rows of `other` leaves the result bit-identical.
    pub fn matmul_unordered(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.dims2("matmul_unordered")?;
        let (k2, m) = other.dims2("matmul_unordered")?;
        if k != k2 {
            return Err(mismatch("matmul_unordered", self.shape(), other.shape()));
        }
        let a = self.data().to_vec();
        let b = other.data().to_vec();
        let mut out = vec![0.0; n * m];
        let mut terms = vec![0.0; k];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    terms[p] = a[i * k + p] * b[p * m + j];
                }
                out[i * m + j] = ordered_sum(&mut terms);
            }
        }
        let (ta, tb) = (self.requires_grad(), other.requires_grad());
        Self::from_op("matmul_unordered", vec![n, m], out, &[self, other], move |g| {
            let ga = ta.then(|| matmul_raw(g, &transpose_raw(&b, k, m), n, m, k));
            let gb = tb.then(|| matmul_raw(&transpose_raw(&a, n, k), g, k, n, m));
            vec![ga, gb]
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (n, m) = self.dims2("transpose")?;
        Self::from_op("transpose", vec![m, n], transpose_raw(self.data(), n, m), &[self], move |g| {
            vec![Some(transpose_raw(g, m, n))]
        })
    }

    fn zip_same(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        if self.shape() != other.shape() {
            return Err(mismatch(op, self.shape(), other.shape()));
        }
        Ok(self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_same(other, "add", |a, b| a + b)?;
        Self::from_op("add", self.shape().to_vec(), out, &[self, other], |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_same(other, "sub", |a, b| a - b)?;
        Self::from_op("sub", self.shape().to_vec(), out, &[self, other], |g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_same(other, "mul", |a, b| a * b)?;
        let a = self.data().to_vec();
        let b = other.data().to_vec();
        Self::from_op("mul", self.shape().to_vec(), out, &[self, other], move |g| {
            vec![
                Some(g.iter().zip(&b).map(|(g, b)| g * b).collect()),
                Some(g.iter().zip(&a).map(|(g, a)| g * a).collect()),
            ]
        })
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let m = *self.shape().last().unwrap_or(&0);
        if bias.shape() != [m] {
            return Err(mismatch("add_bias", self.shape(), bias.shape()));
        }
        let b = bias.data();
        let out: Vec<f64> = self.data().iter().enumerate().map(|(i, v)| v + b[i % m]).collect();
        Self::from_op("add_bias", self.shape().to_vec(), out, &[self, bias], move |g| {
            let mut gb = vec![0.0; m];
            for (i, v) in g.iter().enumerate() {
                gb[i % m] += v;
            }
            vec![Some(g.to_vec()), Some(gb)]
        })
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let out = self.data().iter().map(|v| v * s).collect();
        Self::from_op("scale", self.shape().to_vec(), out, &[self], move |g| {
            vec![Some(g.iter().map(|v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        let out = self.data().iter().map(|v| v + s).collect();
        Self::from_op("add_scalar", self.shape().to_vec(), out, &[self], |g| vec![Some(g.to_vec())])
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let x = self.data().to_vec();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let y2 = y.clone();
        Self::from_op(op, self.shape().to_vec(), y, &[self], move |g| {
            vec![Some(g.iter().zip(x.iter().zip(&y2)).map(|(g, (&x, &y))| g * df(x, y)).collect())]
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        self.unary("clamp", move |x| x.clamp(lo, hi), move |x, _| {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn sum(&self) -> Result<Tensor> {
        let n = self.numel();
        let s = self.data().iter().sum();
        Self::from_op("sum", vec![], vec![s], &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Row-wise softmax of a matrix, max-shifted for stability.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (n, m) = self.dims2("softmax_rows")?;
        let mut y = vec![0.0; n * m];
        for i in 0..n {
            let row = &self.data()[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for j in 0..m {
                y[i * m + j] = (row[j] - mx).exp();
            }
            let z = ordered_sum(&mut y[i * m..(i + 1) * m].to_vec());
            for j in 0..m {
                y[i * m + j] /= z;
            }
        }
        let y2 = y.clone();
        Self::from_op("softmax_rows", vec![n, m], y, &[self], move |g| {
            let mut gx = vec![0.0; n * m];
            for i in 0..n {
                let yr = &y2[i * m..(i + 1) * m];
                let gr = &g[i * m..(i + 1) * m];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..m {
                    gx[i * m + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Mean cross-entropy of row-wise logits against class indices.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (n, m) = self.dims2("cross_entropy")?;
        if targets.len() != n || targets.iter().any(|&t| t >= m) {
            return Err(MicronetError::ShapeMismatch(format!(
                "cross_entropy: {n} x {m} logits against targets {targets:?}"
            )));
        }
        let mut probs = vec![0.0; n * m];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &self.data()[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..m {
                probs[i * m + j] = (row[j] - mx).exp() / z;
            }
            loss -= row[targets[i]] - mx - z.ln();
        }
        let targets = targets.to_vec();
        Self::from_op("cross_entropy", vec![], vec![loss / n as f64], &[self], move |g| {
            let mut gx = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                gx[i * m + t] -= 1.0;
            }
            let s = g[0] / n as f64;
            gx.iter_mut().for_each(|v| *v *= s);
            vec![Some(gx)]
        })
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(MicronetError::EmptyInput("concat_cols"))?;
        let (n, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pm) = p.dims2("concat_cols")?;
            if pn != n {
                return Err(mismatch("concat_cols", first.shape(), p.shape()));
            }
            widths.push(pm);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for i in 0..n {
                out[i * total + off..i * total + off + w].copy_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Self::from_op("concat_cols", vec![n, total], out, &refs, move |g| {
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut gp = vec![0.0; n * w];
                    for i in 0..n {
                        gp[i * w..(i + 1) * w].copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    off += w;
                    Some(gp)
                })
                .collect()
        })
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(MicronetError::EmptyInput("concat_rows"))?;
        let (_, m) = first.dims2("concat_rows")?;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for p in parts {
            let (pn, pm) = p.dims2("concat_rows")?;
            if pm != m {
                return Err(mismatch("concat_rows", first.shape(), p.shape()));
            }
            sizes.push(pn * m);
            out.extend_from_slice(p.data());
        }
        let rows = out.len() / m.max(1);
        let refs: Vec<&Tensor> = parts.iter().collect();
        Self::from_op("concat_rows", vec![rows, m], out, &refs, move |g| {
            let mut off = 0;
            sizes
                .iter()
                .map(|&s| {
                    let gp = g[off..off + s].to_vec();
                    off += s;
                    Some(gp)
                })
                .collect()
        })
    }

    /// Selects rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (n, m) = self.dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(MicronetError::ShapeMismatch(format!("gather_rows: row {bad} of {n}")));
        }
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            out.extend_from_slice(&self.data()[i * m..(i + 1) * m]);
        }
        let idx = idx.to_vec();
        Self::from_op("gather_rows", vec![idx.len(), m], out, &[self], move |g| {
            let mut gx = vec![0.0; n * m];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..m {
                    gx[i * m + j] += g[k * m + j];
                }
            }
            vec![Some(gx)]
        })
    }

    /// Shifts rows by `offset` (row `i` of the output is row `i + offset` of
    /// the input), zero-filling rows that fall outside.
    pub fn shift_rows(&self, offset: isize) -> Result<Tensor> {
        let (n, m) = self.dims2("shift_rows")?;
        let src = |i: usize| -> Option<usize> {
            let s = i as isize + offset;
            (s >= 0 && (s as usize) < n).then_some(s as usize)
        };
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            if let Some(s) = src(i) {
                out[i * m..(i + 1) * m].copy_from_slice(&self.data()[s * m..(s + 1) * m]);
            }
        }
        Self::from_op("shift_rows", vec![n, m], out, &[self], move |g| {
            let mut gx = vec![0.0; n * m];
            for i in 0..n {
                let s = i as isize + offset;
                if s >= 0 && (s as usize) < n {
                    let s = s as usize;
                    for j in 0..m {
                        gx[s * m + j] += g[i * m + j];
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Max over consecutive groups of `group` rows: `(G * group) x C -> G x C`.
    pub fn max_pool_groups(&self, group: usize) -> Result<Tensor> {
        let (n, m) = self.dims2("max_pool_groups")?;
        if group == 0 || n % group != 0 {
            return Err(MicronetError::ShapeMismatch(format!(
                "max_pool_groups: {n} rows in groups of {group}"
            )));
        }
        let groups = n / group;
        let mut out = vec![f64::NEG_INFINITY; groups * m];
        let mut arg = vec![0usize; groups * m];
        for gi in 0..groups {
            for r in 0..group {
                let row = gi * group + r;
                for j in 0..m {
                    let v = self.data()[row * m + j];
                    if v > out[gi * m + j] {
                        out[gi * m + j] = v;
                        arg[gi * m + j] = row;
                    }
                }
            }
        }
        Self::from_op("max_pool_groups", vec![groups, m], out, &[self], move |g| {
            let mut gx = vec![0.0; n * m];
            for (k, &row) in arg.iter().enumerate() {
                gx[row * m + k % m] += g[k];
            }
            vec![Some(gx)]
        })
    }

    /// Same-padded 2D convolution of an `H x W x Cin` map with a
    /// `k x k x Cin x Cout` kernel (no bias).
    pub fn conv2d(&self, kernel: &Tensor, stride: usize) -> Result<Tensor> {
        let (h, w, cin) = self.dims3("conv2d")?;
        let (kh, kw, kcin, cout) = match kernel.shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(MicronetError::ShapeMismatch(format!("conv2d kernel {s:?}"))),
        };
        if kcin != cin || kh != kw || kh % 2 == 0 || stride == 0 {
            return Err(mismatch("conv2d", self.shape(), kernel.shape()));
        }
        let pad = (kh / 2) as isize;
        let ho = h.div_ceil(stride);
        let wo = w.div_ceil(stride);
        // im2col: (ho*wo) x (k*k*cin)
        let kk = kh * kw * cin;
        let mut cols = vec![0.0; ho * wo * kk];
        let mut taps: Vec<(usize, usize, usize)> = Vec::new(); // (col row, col offset, input pixel)
        for oy in 0..ho {
            for ox in 0..wo {
                let r = oy * wo + ox;
                for ky in 0..kh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let pix = iy as usize * w + ix as usize;
                        let off = (ky * kw + kx) * cin;
                        cols[r * kk + off..r * kk + off + cin]
                            .copy_from_slice(&self.data()[pix * cin..(pix + 1) * cin]);
                        taps.push((r, off, pix));
                    }
                }
            }
        }
        let out = matmul_raw(&cols, kernel.data(), ho * wo, kk, cout);
        let kdata = kernel.data().to_vec();
        let (tx, tk) = (self.requires_grad(), kernel.requires_grad());
        Self::from_op("conv2d", vec![ho, wo, cout], out, &[self, kernel], move |g| {
            let gk = tk.then(|| matmul_raw(&transpose_raw(&cols, ho * wo, kk), g, kk, ho * wo, cout));
            let gx = tx.then(|| {
                let gcols = matmul_raw(g, &transpose_raw(&kdata, kk, cout), ho * wo, cout, kk);
                let mut gx = vec![0.0; h * w * cin];
                for &(r, off, pix) in &taps {
                    for c in 0..cin {
                        gx[pix * cin + c] += gcols[r * kk + off + c];
                    }
                }
                gx
            });
            vec![gx, gk]
        })
    }

    /// Average pooling of an `H x W x C` map down to `p x p`; `H` and `W`
    /// must be multiples of `p`.
    pub fn adaptive_avg_pool(&self, p: usize) -> Result<Tensor> {
        let (h, w, c) = self.dims3("adaptive_avg_pool")?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(MicronetError::ShapeMismatch(format!(
                "adaptive_avg_pool: {h} x {w} to {p} x {p}"
            )));
        }
        let (bh, bw) = (h / p, w / p);
        let norm = 1.0 / (bh * bw) as f64;
        let mut out = vec![0.0; p * p * c];
        for y in 0..h {
            for x in 0..w {
                let o = (y / bh) * p + x / bw;
                for ch in 0..c {
                    out[o * c + ch] += self.data()[(y * w + x) * c + ch] * norm;
                }
            }
        }
        Self::from_op("adaptive_avg_pool", vec![p, p, c], out, &[self], move |g| {
            let mut gx = vec![0.0; h * w * c];
            for y in 0..h {
                for x in 0..w {
                    let o = (y / bh) * p + x / bw;
                    for ch in 0..c {
                        gx[(y * w + x) * c + ch] = g[o * c + ch] * norm;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Linear map `out[o, :] = Σ_i weights[o][i].1 * self[weights[o][i].0, :]`
    /// over the leading axis with fixed sparse weights. The trailing axes are
    /// flattened into channels.
    pub(crate) fn sparse_rows(&self, out_shape: Vec<usize>, weights: Vec<Vec<(usize, f64)>>) -> Result<Tensor> {
        let rows_in = self.shape().first().copied().unwrap_or(1);
        let c = self.numel() / rows_in.max(1);
        let rows_out = weights.len();
        if numel(&out_shape) != rows_out * c {
            return Err(MicronetError::ShapeMismatch(format!(
                "sparse_rows: {rows_out} rows of {c} into {out_shape:?}"
            )));
        }
        let mut out = vec![0.0; rows_out * c];
        for (o, taps) in weights.iter().enumerate() {
            for &(i, wt) in taps {
                for ch in 0..c {
                    out[o * c + ch] += wt * self.data()[i * c + ch];
                }
            }
        }
        let n_in = self.numel();
        Self::from_op("sparse_rows", out_shape, out, &[self], move |g| {
            let mut gx = vec![0.0; n_in];
            for (o, taps) in weights.iter().enumerate() {
                for &(i, wt) in taps {
                    for ch in 0..c {
                        gx[i * c + ch] += wt * g[o * c + ch];
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}
