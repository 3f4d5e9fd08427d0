//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A `Tape` records every operation of a forward pass; `Tape::backward`
//! walks the records in reverse and accumulates gradients with respect to
//! any earlier node. All values are `Array2<f64>`; scalars are 1x1
//! matrices, row vectors 1xN, column vectors Nx1. The op set is the
//! minimum needed for attention blocks, layer norm, sigmoid/BCE heads and
//! mean-squared losses, so every derivative here is a short closed form.

use ndarray::{concatenate, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// m x n plus a 1 x n row broadcast over rows.
    AddRow(Var, Var),
    /// m x n times a 1 x n row broadcast over rows.
    MulRow(Var, Var),
    /// m x n minus an m x 1 column broadcast over columns.
    SubCol(Var, Var),
    /// m x n divided by an m x 1 column broadcast over columns.
    DivCol(Var, Var),
    MatMul(Var, Var),
    /// a . b^T without materializing the transpose on the tape.
    MatMulNT(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    RowSum(Var),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize, usize),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v` with zeros substituted for an absent dependency.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Mat {
        match self.grads[v.0] {
            Some(ref g) => g.clone(),
            None => Mat::zeros(shape),
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Mat::from_elem((1, 1), value))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.dims(a);
        assert_eq!(self.dims(row), (1, n), "add_row: row shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.dims(a);
        assert_eq!(self.dims(row), (1, n), "mul_row: row shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[row.0].value;
        self.push(v, Op::MulRow(a, row))
    }

    pub fn sub_col(&mut self, a: Var, col: Var) -> Var {
        let (m, _) = self.dims(a);
        assert_eq!(self.dims(col), (m, 1), "sub_col: col shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[col.0].value;
        self.push(v, Op::SubCol(a, col))
    }

    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let (m, _) = self.dims(a);
        assert_eq!(self.dims(col), (m, 1), "div_col: col shape mismatch");
        let v = &self.nodes[a.0].value / &self.nodes[col.0].value;
        self.push(v, Op::DivCol(a, col))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a).1, self.dims(b).0, "matmul: inner dim mismatch");
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    /// `a . b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a).1, self.dims(b).1, "matmul_nt: inner dim mismatch");
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value + k;
        self.push(v, Op::AddConst(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// Elementwise clamp; gradient passes through strictly inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|e| e / s);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise sum, m x n -> m x 1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let n = self.dims(a).1 as f64;
        let s = self.row_sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let v = Mat::from_elem((1, 1), self.nodes[a.0].value.sum() / (m * n) as f64);
        self.push(v, Op::MeanAll(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(m * n, rows * cols, "reshape: element count mismatch");
        let flat: Vec<f64> = self.nodes[a.0].value.iter().cloned().collect();
        let v = Mat::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(v, Op::Reshape(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a).0, self.dims(b).0, "concat_cols: row mismatch");
        let v = concatenate![Axis(1), self.nodes[a.0].value, self.nodes[b.0].value];
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, _) = self.dims(a);
        assert!(start + len <= m, "slice_rows: out of range");
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(v, Op::SliceRows(a, start, len))
    }

    /// Backpropagate from a 1x1 scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.dims(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let add_to = |grads: &mut [Option<Mat>], v: Var, delta: Mat| match grads[v.0] {
            Some(ref mut acc) => *acc += &delta,
            None => grads[v.0] = Some(delta),
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, a, g.clone());
                add_to(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, a, g.clone());
                add_to(grads, b, -g);
            }
            Op::Mul(a, b) => {
                add_to(grads, a, g * val(b));
                add_to(grads, b, g * val(a));
            }
            Op::AddRow(a, r) => {
                add_to(grads, a, g.clone());
                add_to(grads, r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, r) => {
                add_to(grads, a, g * val(r));
                add_to(
                    grads,
                    r,
                    (g * val(a)).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
            }
            Op::SubCol(a, c) => {
                add_to(grads, a, g.clone());
                add_to(grads, c, -(g.sum_axis(Axis(1)).insert_axis(Axis(1))));
            }
            Op::DivCol(a, c) => {
                let cv = val(c);
                add_to(grads, a, g / cv);
                let da = g * val(a) / (cv * cv);
                add_to(grads, c, -(da.sum_axis(Axis(1)).insert_axis(Axis(1))));
            }
            Op::MatMul(a, b) => {
                add_to(grads, a, g.dot(&val(b).t()));
                add_to(grads, b, val(a).t().dot(g));
            }
            Op::MatMulNT(a, b) => {
                add_to(grads, a, g.dot(val(b)));
                add_to(grads, b, g.t().dot(val(a)));
            }
            Op::Transpose(a) => add_to(grads, a, g.t().to_owned()),
            Op::Scale(a, k) => add_to(grads, a, g * k),
            Op::AddConst(a) => add_to(grads, a, g.clone()),
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                add_to(grads, a, g * y * (1.0 - y));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                add_to(grads, a, g * (1.0 - y * y));
            }
            Op::Ln(a) => add_to(grads, a, g / val(a)),
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                add_to(grads, a, g / (2.0 * y));
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(a);
                let mask = x.mapv(|e| if e > lo && e < hi { 1.0 } else { 0.0 });
                add_to(grads, a, g * &mask);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let gy = g * y;
                let rs = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                add_to(grads, a, &gy - &(y * &rs));
            }
            Op::RowSum(a) => {
                let (m, n) = val(a).dim();
                let mut d = Mat::zeros((m, n));
                for r in 0..m {
                    let gr = g[(r, 0)];
                    d.row_mut(r).fill(gr);
                }
                add_to(grads, a, d);
            }
            Op::SumAll(a) => {
                let (m, n) = val(a).dim();
                add_to(grads, a, Mat::from_elem((m, n), g[(0, 0)]));
            }
            Op::MeanAll(a) => {
                let (m, n) = val(a).dim();
                add_to(grads, a, Mat::from_elem((m, n), g[(0, 0)] / (m * n) as f64));
            }
            Op::Reshape(a) => {
                let (m, n) = val(a).dim();
                let flat: Vec<f64> = g.iter().cloned().collect();
                add_to(grads, a, Mat::from_shape_vec((m, n), flat).expect("reshape grad"));
            }
            Op::ConcatCols(a, b) => {
                let na = val(a).dim().1;
                add_to(grads, a, g.slice(ndarray::s![.., ..na]).to_owned());
                add_to(grads, b, g.slice(ndarray::s![.., na..]).to_owned());
            }
            Op::SliceRows(a, start, len) => {
                let (m, n) = val(a).dim();
                let mut d = Mat::zeros((m, n));
                d.slice_mut(ndarray::s![start..start + len, ..]).assign(g);
                add_to(grads, a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Mat {
        Mat::from_shape_fn((m, n), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences around every entry of every leaf.
    fn check_grads<F>(leaves: Vec<Mat>, f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let step = 1e-6;
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.wrt(vars[li], leaf.dim());
            for r in 0..leaf.dim().0 {
                for c in 0..leaf.dim().1 {
                    let eval = |delta: f64| {
                        let mut pert = leaves.clone();
                        pert[li][(r, c)] += delta;
                        let mut t = Tape::new();
                        let vs: Vec<Var> = pert.into_iter().map(|m| t.leaf(m)).collect();
                        let o = f(&mut t, &vs);
                        t.value(o)[(0, 0)]
                    };
                    let fd = (eval(step) - eval(-step)) / (2.0 * step);
                    let a = analytic[(r, c)];
                    assert!(
                        (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-3),
                        "leaf {li} entry ({r},{c}): analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let c = rand_mat(&mut rng, 3, 2);
        check_grads(vec![a, b, c], |t, v| {
            let p = t.matmul(v[0], v[1]);
            let s = t.mul(p, v[2]);
            let tanh = t.tanh(s);
            t.mean_all(tanh)
        });
    }

    #[test]
    fn softmax_attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_mat(&mut rng, 3, 4);
        let k = rand_mat(&mut rng, 5, 4);
        let v = rand_mat(&mut rng, 5, 4);
        check_grads(vec![q, k, v], |t, vars| {
            let s = t.matmul_nt(vars[0], vars[1]);
            let s = t.scale(s, 0.5);
            let w = t.softmax_rows(s);
            let o = t.matmul(w, vars[2]);
            let sq = t.mul(o, o);
            t.mean_all(sq)
        });
    }

    #[test]
    fn layer_norm_shape_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 4, 6);
        let gamma = rand_mat(&mut rng, 1, 6);
        let beta = rand_mat(&mut rng, 1, 6);
        check_grads(vec![x, gamma, beta], |t, v| {
            let mu = t.row_mean(v[0]);
            let cent = t.sub_col(v[0], mu);
            let sq = t.mul(cent, cent);
            let var = t.row_mean(sq);
            let var = t.add_const(var, 1e-5);
            let sd = t.sqrt(var);
            let norm = t.div_col(cent, sd);
            let y = t.mul_row(norm, v[1]);
            let y = t.add_row(y, v[2]);
            let y2 = t.mul(y, y);
            t.mean_all(y2)
        });
    }

    #[test]
    fn sigmoid_bce_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_mat(&mut rng, 2, 5);
        let tgt = Mat::from_shape_fn((2, 5), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        check_grads(vec![z], move |t, v| {
            let p = t.sigmoid(v[0]);
            let p = t.clamp(p, 1e-6, 1.0 - 1e-6);
            let tv = t.leaf(tgt.clone());
            let lp = t.ln(p);
            let pm = t.neg(p);
            let om = t.add_const(pm, 1.0);
            let lom = t.ln(om);
            let tm = t.neg(tv);
            let otm = t.add_const(tm, 1.0);
            let a = t.mul(tv, lp);
            let b = t.mul(otm, lom);
            let s = t.add(a, b);
            let n = t.neg(s);
            t.mean_all(n)
        });
    }

    #[test]
    fn concat_slice_reshape_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 3, 2);
        let b = rand_mat(&mut rng, 3, 3);
        check_grads(vec![a, b], |t, v| {
            let cat = t.concat_cols(v[0], v[1]);
            let sl = t.slice_rows(cat, 1, 2);
            let rs = t.reshape(sl, 5, 2);
            let tr = t.transpose(rs);
            let sq = t.mul(tr, tr);
            t.sum_all(sq)
        });
    }

    #[test]
    fn broadcast_and_division_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_mat(&mut rng, 4, 3);
        check_grads(vec![x], |t, v| {
            let sq = t.mul(v[0], v[0]);
            let n2 = t.row_sum(sq);
            let n2 = t.add_const(n2, 1e-9);
            let nrm = t.sqrt(n2);
            let unit = t.div_col(v[0], nrm);
            let s = t.mul(unit, unit);
            t.mean_all(s)
        });
    }

    #[test]
    fn repeated_operand_accumulates_both_paths() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::from_elem((1, 1), 3.0));
        let y = tape.mul(x, x);
        let g = tape.backward(y);
        assert_eq!(g.wrt(x, (1, 1))[(0, 0)], 6.0);
    }

    #[test]
    fn disconnected_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::from_elem((1, 1), 2.0));
        let z = tape.leaf(Mat::from_elem((1, 1), 5.0));
        let y = tape.mul(x, x);
        let g = tape.backward(y);
        assert!(g.get(z).is_none());
    }
}
