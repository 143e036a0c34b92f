use crate::autodiff::tensor::{gemm_into, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is expanded to the left operand's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `1 x cols`, repeated down the rows.
    Row,
    /// `rows x 1`, repeated across the columns.
    Col,
    /// `1 x 1`.
    Scalar,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var, Bcast),
    Scale(Var, T),
    Relu(Var),
    Log(Var),
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    /// Winning row per column.
    MaxOverRows(Var, Vec<usize>),
    SumOverRows(Var),
    Softmax(Var),
    SelectRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run reverse-mode recorder.
///
/// Every operation appends a node; `backward` walks the nodes in reverse
/// recording order and accumulates gradients additively into each input.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(sa.0, sb.1);
        gemm_into(self.value(a), false, self.value(b), false, &mut out, T::zero());
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb == (1, 1) {
            Ok(Bcast::Scalar)
        } else if sb == (1, sa.1) {
            Ok(Bcast::Row)
        } else if sb == (sa.0, 1) {
            Ok(Bcast::Col)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let bc = self.bcast(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let cols = av.cols();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Bcast::Same => bv.data()[i],
                    Bcast::Row => bv.data()[i % cols],
                    Bcast::Col => bv.data()[i / cols],
                    Bcast::Scalar => bv.data()[0],
                };
                f(x, y)
            })
            .collect();
        let out = Tensor::from_vec(av.rows(), cols, data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b, bc), rg))
    }

    /// Elementwise sum; `b` may be a row vector, a column vector or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise (Hadamard) product with the same broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Natural log; every input must already be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if let Some((index, &value)) = av.data().iter().enumerate().find(|(_, v)| !(**v > T::zero())) {
            return Err(Error::NonPositiveLog { index, value: value.to_f64_lossy() });
        }
        let out = av.map(|v| v.ln());
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn clamp_min(&mut self, a: Var, min: T) -> Var {
        let out = self.value(a).map(|v| if v < min { min } else { v });
        let rg = self.needs(&[a]);
        self.push(out, Op::ClampMin(a, min), rg)
    }

    fn non_empty(&self, op: &'static str, a: Var) -> Result<()> {
        if self.value(a).is_empty() {
            Err(Error::Empty { op })
        } else {
            Ok(())
        }
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.non_empty("sum", a)?;
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.non_empty("mean", a)?;
        let av = self.value(a);
        let out = Tensor::scalar(av.sum() / T::from_usize(av.len()).unwrap());
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    /// Column-wise maximum; ties resolve to the lowest row index.
    pub fn max_over_rows(&mut self, a: Var) -> Result<Var> {
        self.non_empty("max_over_rows", a)?;
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut arg = vec![0usize; cols];
        let mut best: Vec<T> = av.row(0).to_vec();
        for r in 1..rows {
            for c in 0..cols {
                let v = av.get(r, c);
                if v > best[c] {
                    best[c] = v;
                    arg[c] = r;
                }
            }
        }
        let out = Tensor::from_vec(1, cols, best)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::MaxOverRows(a, arg), rg))
    }

    pub fn sum_over_rows(&mut self, a: Var) -> Result<Var> {
        self.non_empty("sum_over_rows", a)?;
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut acc = vec![T::zero(); cols];
        for r in 0..rows {
            for (s, &v) in acc.iter_mut().zip(av.row(r)) {
                *s += v;
            }
        }
        let out = Tensor::from_vec(1, cols, acc)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::SumOverRows(a), rg))
    }

    /// Softmax of an `n x 1` column, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.shape(a);
        if c != 1 {
            return Err(Error::shape("softmax", (n, c), (n, 1)));
        }
        self.non_empty("softmax", a)?;
        let out = Tensor::column(softmax_values(self.value(a).data()));
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Gathers rows by a strictly ascending index list.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        check_ascending("select_rows", indices, rows)?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor::from_vec(indices.len(), cols, data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::SelectRows(a, indices.to_vec()), rg))
    }

    /// Concatenates equal-height blocks along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty { op: "concat_cols" })?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let rows = self.shape(first).0;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::shape("concat_cols", self.shape(first), s));
            }
            total += s.1;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_vec(rows, total, data)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Populates gradients of `loss` for every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let send = |v: Var, t: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm_into(g, false, bv, true, &mut da, T::zero());
                    send(*a, da, grads);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm_into(av, true, g, false, &mut db, T::zero());
                    send(*b, db, grads);
                }
            }
            Op::Binary(kind, a, b, bc) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = av.cols();
                let b_at = |i: usize| match bc {
                    Bcast::Same => bv.data()[i],
                    Bcast::Row => bv.data()[i % cols],
                    Bcast::Col => bv.data()[i / cols],
                    Bcast::Scalar => bv.data()[0],
                };
                if self.requires_grad(*a) {
                    let da = match kind {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => {
                            let d = g.data().iter().enumerate().map(|(i, &gi)| gi * b_at(i)).collect();
                            Tensor::from_vec(av.rows(), cols, d).expect("shape preserved")
                        }
                    };
                    send(*a, da, grads);
                }
                if self.requires_grad(*b) {
                    let full: Vec<T> = match kind {
                        Binary::Add => g.data().to_vec(),
                        Binary::Sub => g.data().iter().map(|&x| -x).collect(),
                        Binary::Mul => g.data().iter().zip(av.data()).map(|(&gi, &ai)| gi * ai).collect(),
                    };
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    for (i, v) in full.into_iter().enumerate() {
                        let j = match bc {
                            Bcast::Same => i,
                            Bcast::Row => i % cols,
                            Bcast::Col => i / cols,
                            Bcast::Scalar => 0,
                        };
                        db.data_mut()[j] += v;
                    }
                    send(*b, db, grads);
                }
            }
            Op::Scale(a, s) => send(*a, g.map(|x| x * *s), grads),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gi, x| if x > T::zero() { gi } else { T::zero() });
                send(*a, d, grads);
            }
            Op::Log(a) => send(*a, g.zip_map(self.value(*a), |gi, x| gi / x), grads),
            Op::ClampMin(a, min) => {
                let d = g.zip_map(self.value(*a), |gi, x| if x > *min { gi } else { T::zero() });
                send(*a, d, grads);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                send(*a, Tensor::full(r, c, g.item()), grads);
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let n = T::from_usize(r * c).unwrap();
                send(*a, Tensor::full(r, c, g.item() / n), grads);
            }
            Op::MaxOverRows(a, arg) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for (col, &row) in arg.iter().enumerate() {
                    d.set(row, col, g.data()[col]);
                }
                send(*a, d, grads);
            }
            Op::SumOverRows(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for row in 0..r {
                    d.data_mut()[row * c..(row + 1) * c].copy_from_slice(g.data());
                }
                send(*a, d, grads);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let dot: T = y.data().iter().zip(g.data()).map(|(&yi, &gi)| yi * gi).sum();
                send(*a, y.zip_map(g, |yi, gi| yi * (gi - dot)), grads);
            }
            Op::SelectRows(a, indices) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    d.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.row(k));
                }
                send(*a, d, grads);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    if self.requires_grad(p) {
                        let mut d = Tensor::zeros(rows, c);
                        for r in 0..rows {
                            d.data_mut()[r * c..(r + 1) * c].copy_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        send(p, d, grads);
                    }
                    offset += c;
                }
            }
        }
    }
}

/// Max-stabilized softmax over a slice.
pub fn softmax_values<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn check_ascending(op: &'static str, indices: &[usize], len: usize) -> Result<()> {
    for (k, &i) in indices.iter().enumerate() {
        if i >= len {
            return Err(Error::IndexOutOfRange { op, index: i, len });
        }
        if k > 0 && indices[k - 1] >= i {
            return Err(Error::UnorderedIndex { op, prev: indices[k - 1], next: i });
        }
    }
    Ok(())
}
