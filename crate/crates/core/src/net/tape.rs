//! Reverse-mode differentiation over dense 2-D tensors.
//!
//! Every operation records its inputs on a [`Tape`]. [`Tape::grad`] walks the
//! tape backwards and writes the adjoints as new tape operations, so a
//! gradient is itself differentiable (forces from an energy, then a loss on
//! those forces, then parameter gradients).

use std::rc::Rc;

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape {rows}x{cols} vs {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self::new(data.len(), 1, data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self::new(1, data.len(), data)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    fn zip(&self, o: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), o.shape(), "elementwise shape mismatch");
        Self::new(self.rows, self.cols, self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect())
    }
}

/// Handle to a tape entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a[R,C] * c[R,1]`, broadcast over columns.
    MulCol(Var, Var),
    /// `a[R,C] * b[1,C]`, broadcast over rows.
    MulRow(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Gather(Var, Rc<Vec<usize>>),
    ScatterAdd(Var, Rc<Vec<usize>>),
    SumCols(Var),
    ExpandCols(Var),
    SumRows(Var),
    ExpandRows(Var),
    Sigmoid(Var),
    Exp(Var),
    Cos(Var),
    Sin(Var),
    Sqrt(Var),
    Recip(Var),
}

struct Node {
    value: Tensor,
    op: Op,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "not a scalar");
        t.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inputs and parameters; constants are leaves that nobody asks a
    /// gradient for.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn v(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.v(a).zip(self.v(b), |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.v(a).zip(self.v(b), |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.v(a).zip(self.v(b), |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (ta, tc) = (self.v(a), self.v(c));
        assert_eq!((tc.rows, tc.cols), (ta.rows, 1), "mul_col shape");
        let mut out = ta.clone();
        for r in 0..ta.rows {
            let s = tc.data[r];
            for x in &mut out.data[r * ta.cols..(r + 1) * ta.cols] {
                *x *= s;
            }
        }
        self.push(out, Op::MulCol(a, c))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.v(a), self.v(b));
        assert_eq!((tb.rows, tb.cols), (1, ta.cols), "mul_row shape");
        let mut out = ta.clone();
        for row in out.data.chunks_mut(ta.cols) {
            for (x, s) in row.iter_mut().zip(&tb.data) {
                *x *= s;
            }
        }
        self.push(out, Op::MulRow(a, b))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.v(a), self.v(b));
        assert_eq!((tb.rows, tb.cols), (1, ta.cols), "add_row shape");
        let mut out = ta.clone();
        for row in out.data.chunks_mut(ta.cols) {
            for (x, s) in row.iter_mut().zip(&tb.data) {
                *x += s;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.v(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.v(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.v(a), self.v(b));
        assert_eq!(ta.cols, tb.rows, "matmul inner dimension");
        let (n, k, m) = (ta.rows, ta.cols, tb.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = ta.data[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, w) in orow.iter_mut().zip(&tb.data[p * m..(p + 1) * m]) {
                    *o += x * w;
                }
            }
        }
        self.push(Tensor::new(n, m, out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.v(a);
        let mut out = Tensor::zeros(ta.cols, ta.rows);
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                out.data[c * ta.rows + r] = ta.data[r * ta.cols + c];
            }
        }
        self.push(out, Op::Transpose(a))
    }

    /// Row `k` of the result is row `idx[k]` of `a`.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let ta = self.v(a);
        let mut data = Vec::with_capacity(idx.len() * ta.cols);
        for &i in idx.iter() {
            data.extend_from_slice(&ta.data[i * ta.cols..(i + 1) * ta.cols]);
        }
        let t = Tensor::new(idx.len(), ta.cols, data);
        self.push(t, Op::Gather(a, idx))
    }

    /// Row `k` of `a` is added into row `idx[k]` of an `n`-row result,
    /// in ascending `k`.
    pub fn scatter_add(&mut self, a: Var, idx: Rc<Vec<usize>>, n: usize) -> Var {
        let ta = self.v(a);
        assert_eq!(ta.rows, idx.len(), "scatter_add index length");
        let mut out = Tensor::zeros(n, ta.cols);
        for (k, &i) in idx.iter().enumerate() {
            for (o, x) in out.data[i * ta.cols..(i + 1) * ta.cols]
                .iter_mut()
                .zip(&ta.data[k * ta.cols..(k + 1) * ta.cols])
            {
                *o += x;
            }
        }
        self.push(out, Op::ScatterAdd(a, idx))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ta = self.v(a);
        let data = ta.data.chunks(ta.cols.max(1)).map(|r| r.iter().sum()).collect();
        let t = Tensor::new(ta.rows, 1, if ta.cols == 0 { vec![0.0; ta.rows] } else { data });
        self.push(t, Op::SumCols(a))
    }

    pub fn expand_cols(&mut self, a: Var, cols: usize) -> Var {
        let ta = self.v(a);
        assert_eq!(ta.cols, 1, "expand_cols needs a column");
        let data = ta.data.iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect();
        let t = Tensor::new(ta.rows, cols, data);
        self.push(t, Op::ExpandCols(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.v(a);
        let mut out = vec![0.0; ta.cols];
        for row in ta.data.chunks(ta.cols.max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let t = Tensor::row(out);
        self.push(t, Op::SumRows(a))
    }

    pub fn expand_rows(&mut self, a: Var, rows: usize) -> Var {
        let ta = self.v(a);
        assert_eq!(ta.rows, 1, "expand_rows needs a row");
        let mut data = Vec::with_capacity(rows * ta.cols);
        for _ in 0..rows {
            data.extend_from_slice(&ta.data);
        }
        let t = Tensor::new(rows, ta.cols, data);
        self.push(t, Op::ExpandRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let c = self.sum_cols(a);
        self.sum_rows(c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.v(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(t, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.v(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let t = self.v(a).map(f64::cos);
        self.push(t, Op::Cos(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let t = self.v(a).map(f64::sin);
        self.push(t, Op::Sin(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.v(a).map(f64::sqrt);
        self.push(t, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let t = self.v(a).map(|x| 1.0 / x);
        self.push(t, Op::Recip(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    fn accumulate(&mut self, slot: &mut Option<Var>, g: Var) {
        *slot = Some(match *slot {
            Some(prev) => self.add(prev, g),
            None => g,
        });
    }

    /// Gradient of the scalar `out` with respect to each of `wrt`, built on
    /// the tape so that it can be differentiated again. Inputs `out` does not
    /// depend on get `None`.
    pub fn grad(&mut self, out: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        assert_eq!(self.v(out).shape(), (1, 1), "grad needs a scalar output");
        let n = out.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; n];
        let one = self.leaf(Tensor::filled(1, 1, 1.0));
        adj[out.0] = Some(one);
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let me = Var(i);
            let mut send = |tape: &mut Tape, to: Var, gv: Var| {
                let mut slot = adj[to.0];
                tape.accumulate(&mut slot, gv);
                adj[to.0] = slot;
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(self, a, g);
                    send(self, b, g);
                }
                Op::Sub(a, b) => {
                    send(self, a, g);
                    let ng = self.scale(g, -1.0);
                    send(self, b, ng);
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(g, b);
                    let gb = self.mul(g, a);
                    send(self, a, ga);
                    send(self, b, gb);
                }
                Op::MulCol(a, c) => {
                    let ga = self.mul_col(g, c);
                    let ga_c = self.mul(g, a);
                    let gc = self.sum_cols(ga_c);
                    send(self, a, ga);
                    send(self, c, gc);
                }
                Op::MulRow(a, b) => {
                    let ga = self.mul_row(g, b);
                    let gab = self.mul(g, a);
                    let gb = self.sum_rows(gab);
                    send(self, a, ga);
                    send(self, b, gb);
                }
                Op::AddRow(a, b) => {
                    let gb = self.sum_rows(g);
                    send(self, a, g);
                    send(self, b, gb);
                }
                Op::Scale(a, s) => {
                    let ga = self.scale(g, s);
                    send(self, a, ga);
                }
                Op::AddScalar(a) => send(self, a, g),
                Op::MatMul(a, b) => {
                    let bt = self.transpose(b);
                    let ga = self.matmul(g, bt);
                    let at = self.transpose(a);
                    let gb = self.matmul(at, g);
                    send(self, a, ga);
                    send(self, b, gb);
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g);
                    send(self, a, ga);
                }
                Op::Gather(a, idx) => {
                    let rows = self.v(a).rows;
                    let ga = self.scatter_add(g, idx, rows);
                    send(self, a, ga);
                }
                Op::ScatterAdd(a, idx) => {
                    let ga = self.gather(g, idx);
                    send(self, a, ga);
                }
                Op::SumCols(a) => {
                    let cols = self.v(a).cols;
                    let ga = self.expand_cols(g, cols);
                    send(self, a, ga);
                }
                Op::ExpandCols(a) => {
                    let ga = self.sum_cols(g);
                    send(self, a, ga);
                }
                Op::SumRows(a) => {
                    let rows = self.v(a).rows;
                    let ga = self.expand_rows(g, rows);
                    send(self, a, ga);
                }
                Op::ExpandRows(a) => {
                    let ga = self.sum_rows(g);
                    send(self, a, ga);
                }
                Op::Sigmoid(a) => {
                    let om = self.one_minus(me);
                    let d = self.mul(me, om);
                    let ga = self.mul(g, d);
                    send(self, a, ga);
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, me);
                    send(self, a, ga);
                }
                Op::Cos(a) => {
                    let s = self.sin(a);
                    let ns = self.scale(s, -1.0);
                    let ga = self.mul(g, ns);
                    send(self, a, ga);
                }
                Op::Sin(a) => {
                    let c = self.cos(a);
                    let ga = self.mul(g, c);
                    send(self, a, ga);
                }
                Op::Sqrt(a) => {
                    let r = self.recip(me);
                    let h = self.scale(r, 0.5);
                    let ga = self.mul(g, h);
                    send(self, a, ga);
                }
                Op::Recip(a) => {
                    let sq = self.mul(me, me);
                    let nsq = self.scale(sq, -1.0);
                    let ga = self.mul(g, nsq);
                    send(self, a, ga);
                }
            }
        }
        wrt.iter().map(|w| adj.get(w.0).copied().flatten()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Tensor) {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let y = build(&mut t, x);
        let g = t.grad(y, &[x])[0].unwrap();
        let g = t.value(g).clone();
        let h = 1e-6;
        for k in 0..x0.data.len() {
            let eval = |d: f64| {
                let mut xs = x0.clone();
                xs.data[k] += d;
                let mut t = Tape::new();
                let x = t.leaf(xs);
                let y = build(&mut t, x);
                t.scalar(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g.data[k]).abs() < 1e-6 * (1.0 + fd.abs()), "k={k}: fd {fd} vs {}", g.data[k]);
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor {
        let data = (0..rows * cols)
            .map(|k| (((k as u64 + 1) * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        Tensor::new(rows, cols, data)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let w = sample(3, 4, 1);
        let idx = Rc::new(vec![2, 0, 0, 1]);
        fd_check(
            |t, x| {
                let wv = t.leaf(w.clone());
                let m = t.matmul(x, wv);
                let s = t.silu(m);
                let c = t.sum_cols(s);
                let e = t.exp(c);
                let g = t.gather(x, idx.clone());
                let sc = t.scatter_add(g, idx.clone(), 3);
                let sq = t.add_scalar(sc, 3.0);
                let r = t.sqrt(sq);
                let rr = t.recip(r);
                let mc = t.mul_col(rr, e);
                let tr = t.transpose(mc);
                let cs = t.cos(tr);
                let sn = t.sin(cs);
                let row = t.sum_rows(sn);
                let mr = t.mul_row(sn, row);
                let ar = t.add_row(mr, row);
                let er = t.expand_rows(row, 2);
                let ec = t.sum_cols(er);
                let ex = t.expand_cols(ec, 3);
                let a = t.sum_all(ar);
                let b = t.sum_all(ex);
                let d = t.sub(a, b);
                t.square(d)
            },
            sample(3, 3, 2),
        );
    }

    #[test]
    fn second_derivative_through_the_tape() {
        // f = sum(sin(x) * x); d/dx of sum(df/dx) = sum of f''.
        let x0 = sample(2, 3, 5);
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let s = t.sin(x);
        let p = t.mul(s, x);
        let f = t.sum_all(p);
        let g = t.grad(f, &[x])[0].unwrap();
        let gs = t.sum_all(g);
        let h = t.grad(gs, &[x])[0].unwrap();
        for (k, &xv) in x0.data.iter().enumerate() {
            let want = 2.0 * xv.cos() - xv * xv.sin();
            assert!((t.value(h).data[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn unused_input_has_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::filled(1, 1, 2.0));
        let y = t.leaf(Tensor::filled(1, 1, 3.0));
        let z = t.square(x);
        let g = t.grad(z, &[x, y]);
        assert_eq!(t.value(g[0].unwrap()).data, vec![4.0]);
        assert!(g[1].is_none());
    }
}
