//! Dense row-major matrices and a reverse-mode differentiation tape.
//!
//! Every forward op appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! tape in reverse and accumulates partials into the leaves created with
//! [`Tape::param`]. Intermediate adjoints are scratch, so calling `backward`
//! twice without [`Tape::zero_grad`] adds the same gradient twice.
//!
//! The tape is generic over [`Scalar`]: tests run in `f64`, the production
//! model path runs in `f32`.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                let brow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        Ok(Self::from_fn(self.rows, rhs.rows, |i, j| {
            dot(self.row(i), rhs.row(j))
        }))
    }

    /// `self^T * rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::Shape {
                op: "t_matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = rhs.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, rhs: &Self) {
        debug_assert_eq!(self.shape(), rhs.shape());
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a + b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    /// Numerically stable softmax over each row (max subtracted first).
    pub fn row_softmax(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            softmax_in_place(out.row_mut(r));
        }
        out
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T, T),
    AddRow(Var, Var),
    RowSoftmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Ln(Var, T),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    SliceRows(Var, usize),
    MeanGather(Var, Vec<Vec<usize>>),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    tracked: bool,
    grad: Option<Matrix<T>>,
}

/// A recorded computation. Confined to one thread; build a fresh tape per
/// training step.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; gradients accumulate into it.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Input leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Matrix<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            grad: tracked.then(|| Matrix::zeros(value.rows, value.cols)),
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, parents: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value in {op:?}");
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a [`param`](Self::param) leaf.
    pub fn grad(&self, v: Var) -> Option<&Matrix<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.data.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| p - q).collect();
        let v = Matrix::from_vec(x.rows, x.cols, data)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| p * q).collect();
        let v = Matrix::from_vec(x.rows, x.cols, data)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `x * scale + shift` elementwise.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let v = self.value(a).map(|x| x * scale + shift);
        self.push(v, Op::Affine(a, scale, shift), &[a])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows != 1 || r.cols != x.cols {
            return Err(Error::Shape {
                op: "add_row",
                lhs: x.shape(),
                rhs: r.shape(),
            });
        }
        let v = Matrix::from_fn(x.rows, x.cols, |i, j| x.get(i, j) + r.data[j]);
        Ok(self.push(v, Op::AddRow(a, row), &[a, row]))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).row_softmax();
        self.push(v, Op::RowSoftmax(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    /// Natural log with the input clamped below at `floor`; the clamped region
    /// has zero gradient.
    pub fn ln(&mut self, a: Var, floor: T) -> Var {
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push(v, Op::Ln(a, floor), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidValue("concat_rows of nothing".into()))?;
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first),
                    rhs: m.shape(),
                });
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidValue("concat_cols of nothing".into()))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                v.data[r * cols + off..r * cols + off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Column means as a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows == 0 {
            return Err(Error::Shape {
                op: "mean_rows",
                lhs: x.shape(),
                rhs: (1, x.cols),
            });
        }
        let n = T::of(x.rows as f64);
        let v = Matrix::from_fn(1, x.cols, |_, j| {
            (0..x.rows).fold(T::zero(), |acc, i| acc + x.get(i, j)) / n
        });
        Ok(self.push(v, Op::MeanRows(a), &[a]))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.rows {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: x.shape(),
                rhs: (start + len, x.cols),
            });
        }
        let v = Matrix::from_vec(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec())?;
        Ok(self.push(v, Op::SliceRows(a, start), &[a]))
    }

    /// Row `g` of the result is the mean of the rows of `a` listed in
    /// `groups[g]`, summed in list order; an empty group yields zeros.
    pub fn mean_gather(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let x = self.value(a);
        let mut v = Matrix::zeros(groups.len(), x.cols);
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let out = &mut v.data[g * x.cols..(g + 1) * x.cols];
            for &m in members {
                if m >= x.rows {
                    return Err(Error::Shape {
                        op: "mean_gather",
                        lhs: x.shape(),
                        rhs: (m + 1, x.cols),
                    });
                }
                for (o, &s) in out.iter_mut().zip(x.row(m)) {
                    *o = *o + s;
                }
            }
            let n = T::of(members.len() as f64);
            out.iter_mut().for_each(|o| *o = *o / n);
        }
        Ok(self.push(v, Op::MeanGather(a, groups), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Reverse sweep from a `1 x 1` root. Leaf gradients accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                lhs: shape,
                rhs: (1, 1),
            });
        }
        let mut adj: Vec<Option<Matrix<T>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if let Op::Leaf = self.nodes[idx].op {
                if let Some(acc) = self.nodes[idx].grad.as_mut() {
                    acc.add_assign(&g);
                }
                continue;
            }
            let nodes = &self.nodes;
            let node = &nodes[idx];
            let send = |v: Var, contrib: Matrix<T>, adj: &mut Vec<Option<Matrix<T>>>| {
                if !nodes[v.0].tracked {
                    return;
                }
                match adj[v.0].as_mut() {
                    Some(acc) => acc.add_assign(&contrib),
                    None => adj[v.0] = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = g.matmul_t(bv)?;
                    let gb = av.t_matmul(&g)?;
                    send(*a, ga, &mut adj);
                    send(*b, gb, &mut adj);
                }
                Op::Transpose(a) => send(*a, g.transpose(), &mut adj),
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut adj);
                    send(*b, g, &mut adj);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x), &mut adj);
                    send(*a, g, &mut adj);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = zip_map(&g, bv, |x, y| x * y);
                    let gb = zip_map(&g, av, |x, y| x * y);
                    send(*a, ga, &mut adj);
                    send(*b, gb, &mut adj);
                }
                Op::Affine(a, s, _) => {
                    let s = *s;
                    send(*a, g.map(|x| x * s), &mut adj);
                }
                Op::AddRow(a, row) => {
                    let cols = g.cols;
                    let gr = Matrix::from_fn(1, cols, |_, j| {
                        (0..g.rows).fold(T::zero(), |acc, i| acc + g.get(i, j))
                    });
                    send(*row, gr, &mut adj);
                    send(*a, g, &mut adj);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = dot(yr, gr);
                        for (o, (&yy, &gg)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yy * (gg - inner);
                        }
                    }
                    send(*a, ga, &mut adj);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, &node.value, |gg, y| gg * y * (T::one() - y));
                    send(*a, ga, &mut adj);
                }
                Op::Relu(a) => {
                    let x = &nodes[a.0].value;
                    let ga = zip_map(&g, x, |gg, xx| if xx > T::zero() { gg } else { T::zero() });
                    send(*a, ga, &mut adj);
                }
                Op::Ln(a, floor) => {
                    let x = &nodes[a.0].value;
                    let floor = *floor;
                    let ga = zip_map(&g, x, |gg, xx| if xx > floor { gg / xx } else { T::zero() });
                    send(*a, ga, &mut adj);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = nodes[p.0].value.rows;
                        let slice = Matrix::from_vec(
                            rows,
                            g.cols,
                            g.data[start * g.cols..(start + rows) * g.cols].to_vec(),
                        )?;
                        send(p, slice, &mut adj);
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = nodes[p.0].value.cols;
                        let part = Matrix::from_fn(g.rows, cols, |i, j| g.get(i, off + j));
                        send(p, part, &mut adj);
                        off += cols;
                    }
                }
                Op::MeanRows(a) => {
                    let rows = nodes[a.0].value.rows;
                    let n = T::of(rows as f64);
                    let ga = Matrix::from_fn(rows, g.cols, |_, j| g.data[j] / n);
                    send(*a, ga, &mut adj);
                }
                Op::SliceRows(a, start) => {
                    let src = &nodes[a.0].value;
                    let mut ga = Matrix::zeros(src.rows, src.cols);
                    ga.data[start * src.cols..start * src.cols + g.data.len()].copy_from_slice(&g.data);
                    send(*a, ga, &mut adj);
                }
                Op::MeanGather(a, groups) => {
                    let src = &nodes[a.0].value;
                    let mut ga = Matrix::zeros(src.rows, src.cols);
                    for (gi, members) in groups.iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let n = T::of(members.len() as f64);
                        for &m in members {
                            for (o, &x) in ga.row_mut(m).iter_mut().zip(g.row(gi)) {
                                *o = *o + x / n;
                            }
                        }
                    }
                    send(*a, ga, &mut adj);
                }
                Op::Sum(a) => {
                    let (r, c) = nodes[a.0].value.shape();
                    send(*a, Matrix::filled(r, c, g.data[0]), &mut adj);
                }
            }
        }
        Ok(())
    }
}

fn zip_map<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}
