//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation of one forward computation. Calling
//! [`Tape::backward`] walks the record in reverse and returns the gradient of
//! a scalar output with respect to every node that requires one.

use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Entries excluded from a max-pool. Excluded entries take the value zero.
#[derive(Clone, Debug, PartialEq)]
pub enum PoolMask {
    /// One flag per row (point); `true` means dropped.
    Rows(Vec<bool>),
    /// One flag per element, row-major; `true` means dropped.
    Elements(Vec<bool>),
}

impl PoolMask {
    fn dropped(&self, row: usize, col: usize, cols: usize) -> bool {
        match self {
            PoolMask::Rows(m) => m[row],
            PoolMask::Elements(m) => m[row * cols + col],
        }
    }
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Relu { x: Var },
    Concat { parts: Vec<Var> },
    MaxRows { x: Var, argmax: Vec<Option<usize>> },
    Broadcast { x: Var },
    AddRow { x: Var, row: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, c: T },
    Norm2 { x: Var },
    SumAbs { x: Var },
    Max2 { a: Var, b: Var, first: bool },
    Normalize { x: Var, norm: T },
    QuatMul { a: Var, b: Var },
    QuatRotate { q: Var, p: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// `x · w + b` with `x: N×I`, `w: I×O`, `b: 1×O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, cin) = xv.shape();
        let cout = wv.cols();
        assert_eq!(wv.rows(), cin, "linear: input width {cin} vs weight rows {}", wv.rows());
        assert_eq!(bv.shape(), (1, cout), "linear: bias shape");
        let mut out = Tensor::zeros(n, cout);
        for i in 0..n {
            let xr = xv.row(i);
            let or = out.row_mut(i);
            or.copy_from_slice(bv.data());
            for (k, &xk) in xr.iter().enumerate() {
                if xk == T::zero() {
                    continue;
                }
                for (o, &wkj) in or.iter_mut().zip(wv.row(k)) {
                    *o += xk * wkj;
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    /// Per-row normalization over columns followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(g), self.value(b));
        let (n, c) = xv.shape();
        assert_eq!(gv.shape(), (1, c));
        assert_eq!(bv.shape(), (1, c));
        let cf = T::from_usize_lossy(c);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = vec![T::zero(); n * c];
        let mut inv_std = vec![T::zero(); n];
        let mut out = Tensor::zeros(n, c);
        for i in 0..n {
            let r = xv.row(i);
            let mean = r.iter().copied().sum::<T>() / cf;
            let var = r.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / cf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            let xh = &mut xhat[i * c..(i + 1) * c];
            let or = out.row_mut(i);
            for j in 0..c {
                xh[j] = (r[j] - mean) * inv;
                or[j] = gv.data()[j] * xh[j] + bv.data()[j];
            }
        }
        let rg = self.rg(&[x, g, b]);
        self.push(out, Op::LayerNorm { x, g, b, xhat, inv_std }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(n, total);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), n, "concat: row mismatch");
            let c = pv.cols();
            for i in 0..n {
                out.row_mut(i)[off..off + c].copy_from_slice(pv.row(i));
            }
            off += c;
        }
        let rg = self.rg(parts);
        self.push(out, Op::Concat { parts: parts.to_vec() }, rg)
    }

    /// Channel-wise max over rows. Ties go to the lowest row index.
    pub fn max_rows(&mut self, x: Var, mask: Option<&PoolMask>) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        assert!(n > 0, "max over zero rows");
        let mut out = Tensor::zeros(1, c);
        let mut argmax = vec![None; c];
        for j in 0..c {
            let mut best: Option<(T, Option<usize>)> = None;
            for i in 0..n {
                let dropped = mask.is_some_and(|m| m.dropped(i, j, c));
                let v = if dropped { T::zero() } else { xv.get(i, j) };
                let arg = if dropped { None } else { Some(i) };
                match best {
                    Some((b, _)) if v <= b => {}
                    _ => best = Some((v, arg)),
                }
            }
            let (v, arg) = best.expect("nonempty");
            out.data_mut()[j] = v;
            argmax[j] = arg;
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::MaxRows { x, argmax }, rg)
    }

    /// Repeats a `1 x C` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), 1);
        let c = xv.cols();
        let mut out = Tensor::zeros(rows, c);
        for i in 0..rows {
            out.row_mut(i).copy_from_slice(xv.data());
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Broadcast { x }, rg)
    }

    /// Adds a `1 x C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let mut out = self.value(x).clone();
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, out.cols()));
        for i in 0..out.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o += *r;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(out, Op::AddRow { x, row }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add: shape mismatch");
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        assert_eq!(out.shape(), bv.shape(), "sub: shape mismatch");
        for (o, v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o -= *v;
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut out = self.value(x).clone();
        out.scale(c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn norm2(&mut self, x: Var) -> Var {
        let n = self.value(x).data().iter().map(|v| *v * *v).sum::<T>().sqrt();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(n), Op::Norm2 { x }, rg)
    }

    /// Sum of absolute values, as a scalar.
    pub fn sum_abs(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.abs()).sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAbs { x }, rg)
    }

    /// Larger of two scalars; ties pick `a`.
    pub fn max2(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a).item(), self.value(b).item());
        let first = av >= bv;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(if first { av } else { bv }), Op::Max2 { a, b, first }, rg)
    }

    /// `x / |x|`. A zero vector maps to the first basis vector with zero gradient.
    pub fn normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norm = xv.data().iter().map(|v| *v * *v).sum::<T>().sqrt();
        let mut out = xv.clone();
        if norm > T::zero() && norm.is_finite() {
            out.scale(T::one() / norm);
        } else {
            for v in out.data_mut() {
                *v = T::zero();
            }
            out.data_mut()[0] = T::one();
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Normalize { x, norm }, rg)
    }

    /// Hamilton product of two `1 x 4` quaternions `(w, x, y, z)`.
    pub fn quat_mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = quat_mul_raw(av, bv);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::row_vector(out.to_vec()), Op::QuatMul { a, b }, rg)
    }

    /// Rotates every row of `p: N x 3` by the rotation matrix of `q: 1 x 4`.
    pub fn quat_rotate(&mut self, q: Var, p: Var) -> Var {
        let r = quat_matrix_raw(self.value(q).data());
        let pv = self.value(p);
        assert_eq!(pv.cols(), 3);
        let mut out = Tensor::zeros(pv.rows(), 3);
        for i in 0..pv.rows() {
            let src = pv.row(i);
            let dst = out.row_mut(i);
            for a in 0..3 {
                dst[a] = r[a][0] * src[0] + r[a][1] * src[1] + r[a][2] * src[2];
            }
        }
        let rg = self.rg(&[q, p]);
        self.push(out, Op::QuatRotate { q, p }, rg)
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |v: Var, t: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, cin) = xv.shape();
                let cout = wv.cols();
                if self.requires_grad(*x) {
                    let wt = wv.transpose();
                    let mut dx = Tensor::zeros(n, cin);
                    for i in 0..n {
                        let dxr = dx.row_mut(i);
                        for (j, &gij) in g.row(i).iter().enumerate() {
                            if gij == T::zero() {
                                continue;
                            }
                            for (d, &w) in dxr.iter_mut().zip(wt.row(j)) {
                                *d += gij * w;
                            }
                        }
                    }
                    acc(*x, dx, grads);
                }
                if self.requires_grad(*w) {
                    let mut dw = Tensor::zeros(cin, cout);
                    for i in 0..n {
                        let gr = g.row(i);
                        for (k, &xk) in xv.row(i).iter().enumerate() {
                            if xk == T::zero() {
                                continue;
                            }
                            for (d, &gv) in dw.row_mut(k).iter_mut().zip(gr) {
                                *d += xk * gv;
                            }
                        }
                    }
                    acc(*w, dw, grads);
                }
                if self.requires_grad(*b) {
                    acc(*b, sum_rows(g), grads);
                }
            }
            Op::LayerNorm { x, g: gain, b, xhat, inv_std } => {
                let (n, c) = g.shape();
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let cf = T::from_usize_lossy(c);
                    let mut dx = Tensor::zeros(n, c);
                    for i in 0..n {
                        let gr = g.row(i);
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= cf;
                        mean_dx /= cf;
                        let dr = dx.row_mut(i);
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            dr[j] = inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    acc(*x, dx, grads);
                }
                if self.requires_grad(*gain) {
                    let mut dg = Tensor::zeros(1, c);
                    for i in 0..n {
                        let xh = &xhat[i * c..(i + 1) * c];
                        for (j, d) in dg.data_mut().iter_mut().enumerate() {
                            *d += g.get(i, j) * xh[j];
                        }
                    }
                    acc(*gain, dg, grads);
                }
                if self.requires_grad(*b) {
                    acc(*b, sum_rows(g), grads);
                }
            }
            Op::Relu { x } => {
                let mut dx = g.clone();
                for (d, o) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if *o <= T::zero() {
                        *d = T::zero();
                    }
                }
                acc(*x, dx, grads);
            }
            Op::Concat { parts } => {
                let n = g.rows();
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let mut dp = Tensor::zeros(n, c);
                        for i in 0..n {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        acc(*p, dp, grads);
                    }
                    off += c;
                }
            }
            Op::MaxRows { x, argmax } => {
                let (n, c) = self.value(*x).shape();
                let mut dx = Tensor::zeros(n, c);
                for (j, a) in argmax.iter().enumerate() {
                    if let Some(i) = a {
                        dx.data_mut()[i * c + j] = g.data()[j];
                    }
                }
                acc(*x, dx, grads);
            }
            Op::Broadcast { x } => acc(*x, sum_rows(g), grads),
            Op::AddRow { x, row } => {
                acc(*x, g.clone(), grads);
                if self.requires_grad(*row) {
                    acc(*row, sum_rows(g), grads);
                }
            }
            Op::Add { a, b } => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub { a, b } => {
                acc(*a, g.clone(), grads);
                let mut nb = g.clone();
                nb.scale(-T::one());
                acc(*b, nb, grads);
            }
            Op::Scale { x, c } => {
                let mut dx = g.clone();
                dx.scale(*c);
                acc(*x, dx, grads);
            }
            Op::Norm2 { x } => {
                let n = node.value.item();
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                if n > T::zero() {
                    let s = g.item() / n;
                    for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d = *v * s;
                    }
                }
                acc(*x, dx, grads);
            }
            Op::SumAbs { x } => {
                let xv = self.value(*x);
                let s = g.item();
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *d = if *v > T::zero() {
                        s
                    } else if *v < T::zero() {
                        -s
                    } else {
                        T::zero()
                    };
                }
                acc(*x, dx, grads);
            }
            Op::Max2 { a, b, first } => {
                let target = if *first { *a } else { *b };
                acc(target, g.clone(), grads);
            }
            Op::Normalize { x, norm } => {
                if *norm > T::zero() && norm.is_finite() {
                    let y = node.value.data();
                    let yd: T = y.iter().zip(g.data()).map(|(a, b)| *a * *b).sum();
                    let mut dx = g.clone();
                    for (d, yi) in dx.data_mut().iter_mut().zip(y) {
                        *d = (*d - *yi * yd) / *norm;
                    }
                    acc(*x, dx, grads);
                }
            }
            Op::QuatMul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let d = g.data();
                if self.requires_grad(*a) {
                    // out = M(b) a
                    let m = [
                        [bv[0], -bv[1], -bv[2], -bv[3]],
                        [bv[1], bv[0], bv[3], -bv[2]],
                        [bv[2], -bv[3], bv[0], bv[1]],
                        [bv[3], bv[2], -bv[1], bv[0]],
                    ];
                    acc(*a, Tensor::row_vector(mat4t_vec(&m, d).to_vec()), grads);
                }
                if self.requires_grad(*b) {
                    // out = M(a) b
                    let m = [
                        [av[0], -av[1], -av[2], -av[3]],
                        [av[1], av[0], -av[3], av[2]],
                        [av[2], av[3], av[0], -av[1]],
                        [av[3], -av[2], av[1], av[0]],
                    ];
                    acc(*b, Tensor::row_vector(mat4t_vec(&m, d).to_vec()), grads);
                }
            }
            Op::QuatRotate { q, p } => {
                let qv = self.value(*q).data();
                let pv = self.value(*p);
                let r = quat_matrix_raw(qv);
                if self.requires_grad(*p) {
                    let mut dp = Tensor::zeros(pv.rows(), 3);
                    for i in 0..pv.rows() {
                        let gr = g.row(i);
                        let dr = dp.row_mut(i);
                        for c in 0..3 {
                            dr[c] = r[0][c] * gr[0] + r[1][c] * gr[1] + r[2][c] * gr[2];
                        }
                    }
                    acc(*p, dp, grads);
                }
                if self.requires_grad(*q) {
                    let mut outer = [[T::zero(); 3]; 3];
                    for i in 0..pv.rows() {
                        let gr = g.row(i);
                        let pr = pv.row(i);
                        for a in 0..3 {
                            for c in 0..3 {
                                outer[a][c] += gr[a] * pr[c];
                            }
                        }
                    }
                    let dq = quat_matrix_vjp(qv, &outer);
                    acc(*q, Tensor::row_vector(dq.to_vec()), grads);
                }
            }
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn sum_rows<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += *v;
        }
    }
    out
}

fn mat4t_vec<T: Scalar>(m: &[[T; 4]; 4], d: &[T]) -> [T; 4] {
    std::array::from_fn(|c| (0..4).map(|r| m[r][c] * d[r]).sum())
}

pub(crate) fn quat_mul_raw<T: Scalar>(a: &[T], b: &[T]) -> [T; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn quat_matrix_raw<T: Scalar>(q: &[T]) -> [[T; 3]; 3] {
    crate::geometry::Quaternion::new(q[0], q[1], q[2], q[3]).matrix_unchecked()
}

/// `d/dq sum_ij G_ij R_ij(q)` for the polynomial rotation-matrix map.
fn quat_matrix_vjp<T: Scalar>(q: &[T], gm: &[[T; 3]; 3]) -> [T; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let zero = T::zero();
    // d R_ij / d (w, x, y, z)
    let d: [[[T; 4]; 3]; 3] = [
        [
            [zero, zero, -four * y, -four * z],
            [-two * z, two * y, two * x, -two * w],
            [two * y, two * z, two * w, two * x],
        ],
        [
            [two * z, two * y, two * x, two * w],
            [zero, -four * x, zero, -four * z],
            [-two * x, -two * w, two * z, two * y],
        ],
        [
            [-two * y, two * z, -two * w, two * x],
            [two * x, two * w, two * z, two * y],
            [zero, -four * x, -four * y, zero],
        ],
    ];
    let mut out = [zero; 4];
    for i in 0..3 {
        for j in 0..3 {
            for (c, o) in out.iter_mut().enumerate() {
                *o += gm[i][j] * d[i][j][c];
            }
        }
    }
    out
}
