//! Reverse-mode automatic differentiation on a flat tape of matrix ops.
//!
//! Every intermediate is an `Array2<f64>`; scalars are 1×1 and row vectors
//! 1×d. A forward pass records one [`Node`] per op, and [`Tape::backward`]
//! replays the tape in reverse, accumulating vector-Jacobian products. The op
//! set is exactly what the sequence generator needs: dense algebra, row-wise
//! softmax/layer-norm, embedding gathers, and scalar reductions.
//!
//! Graphs can be split across tapes: run the downstream tape first, read the
//! gradient at its inputs, and feed it to [`Tape::backward_seeded`] on the
//! upstream tape. [`gradient_check`] verifies any tape-built function against
//! central finite differences.

use ndarray::{Array2, Axis};

/// Handle to a tape node.
pub type Var = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Add(Var, Var),
    Sub(Var, Var),
    /// Elementwise product.
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    /// n×d plus a 1×d row, broadcast down the rows.
    AddRow(Var, Var),
    /// n×d times a 1×d row, broadcast down the rows.
    MulRow(Var, Var),
    /// n×d times an n×1 column, broadcast across the columns.
    MulCol(Var, Var),
    /// Repeats a 1×d row n times.
    BroadcastRows(Var),
    Relu(Var),
    Exp(Var),
    SoftmaxRow(Var),
    LogSoftmaxRow(Var),
    /// Row-wise standardisation (no affine part).
    LayerNormRow(Var),
    /// Picks whole rows, e.g. an embedding lookup.
    GatherRows(Var, Vec<usize>),
    /// Picks single entries into a k×1 column.
    GatherEntries(Var, Vec<(usize, usize)>),
    SumAll(Var),
    /// Weighted sum of 1×1 scalars.
    LinComb(Vec<(Var, f64)>),
    /// Left ‖ right along the feature axis.
    ConcatCols(Var, Var),
}

const LAYER_NORM_EPS: f64 = 1e-5;

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward pass; `None` means the node
/// does not influence the root.
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0.get(v).and_then(|g| g.as_ref())
    }

    /// Gradient with zeros substituted for unused nodes.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.input(Array2::from_elem((1, 1), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).ncols(), self.value(b).nrows());
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        debug_assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) + &self.value(row).row(0);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        debug_assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) * &self.value(row).row(0);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.value(col).ncols(), 1);
        debug_assert_eq!(self.value(a).nrows(), self.value(col).nrows());
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        debug_assert_eq!(self.value(a).nrows(), 1);
        let row = self.value(a).row(0).to_owned();
        let v = Array2::from_shape_fn((n, row.len()), |(_, j)| row[j]);
        self.push(v, Op::BroadcastRows(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn softmax_row(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::SoftmaxRow(a))
    }

    pub fn log_softmax_row(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmaxRow(a))
    }

    pub fn layer_norm_row(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|x| (x - mean).powi(2)).mean().unwrap();
            let denom = (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|x| (x - mean) / denom);
        }
        self.push(v, Op::LayerNormRow(a))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a);
        let mut v = Array2::zeros((indices.len(), src.ncols()));
        for (i, &r) in indices.iter().enumerate() {
            v.row_mut(i).assign(&src.row(r));
        }
        self.push(v, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn gather_entries(&mut self, a: Var, coords: &[(usize, usize)]) -> Var {
        let src = self.value(a);
        let v = Array2::from_shape_fn((coords.len(), 1), |(i, _)| src[coords[i]]);
        self.push(v, Op::GatherEntries(a, coords.to_vec()))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for (v, c) in terms {
            debug_assert_eq!(self.value(*v).dim(), (1, 1));
            total += c * self.value(*v)[(0, 0)];
        }
        self.push(Array2::from_elem((1, 1), total), Op::LinComb(terms.to_vec()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).nrows(), self.value(b).nrows());
        let (va, vb) = (self.value(a), self.value(b));
        let mut v = Array2::zeros((va.nrows(), va.ncols() + vb.ncols()));
        v.slice_mut(ndarray::s![.., ..va.ncols()]).assign(va);
        v.slice_mut(ndarray::s![.., va.ncols()..]).assign(vb);
        self.push(v, Op::ConcatCols(a, b))
    }

    /// Backward pass from a 1×1 scalar root, seeded with 1.
    pub fn backward(&self, root: Var) -> Gradients {
        debug_assert_eq!(self.value(root).dim(), (1, 1), "root must be scalar");
        self.backward_seeded(root, Array2::from_elem((1, 1), 1.0))
    }

    /// Backward pass seeded with an arbitrary upstream gradient at `root`,
    /// for composing tapes.
    pub fn backward_seeded(&self, root: Var, seed: Array2<f64>) -> Gradients {
        assert_eq!(seed.dim(), self.value(root).dim());
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(seed);
        for i in (0..=root).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients(grads)
    }

    fn propagate(&self, i: Var, dy: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let acc = |slot: &mut Option<Array2<f64>>, delta: Array2<f64>| match slot {
            Some(g) => *g += &delta,
            None => *slot = Some(delta),
        };
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Add(a, b) => {
                acc(&mut grads[*a], dy.clone());
                acc(&mut grads[*b], dy.clone());
            }
            Op::Sub(a, b) => {
                acc(&mut grads[*a], dy.clone());
                acc(&mut grads[*b], -dy);
            }
            Op::Mul(a, b) => {
                acc(&mut grads[*a], dy * self.value(*b));
                acc(&mut grads[*b], dy * self.value(*a));
            }
            Op::Scale(a, c) => acc(&mut grads[*a], dy * *c),
            Op::MatMul(a, b) => {
                acc(&mut grads[*a], dy.dot(&self.value(*b).t()));
                acc(&mut grads[*b], self.value(*a).t().dot(dy));
            }
            Op::Transpose(a) => acc(&mut grads[*a], dy.t().to_owned()),
            Op::AddRow(a, row) => {
                acc(&mut grads[*a], dy.clone());
                acc(&mut grads[*row], dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                acc(&mut grads[*a], dy * &self.value(*row).row(0));
                let da = dy * self.value(*a);
                acc(&mut grads[*row], da.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulCol(a, col) => {
                acc(&mut grads[*a], dy * self.value(*col));
                let da = dy * self.value(*a);
                acc(&mut grads[*col], da.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::BroadcastRows(a) => {
                acc(&mut grads[*a], dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(&mut grads[*a], dy * &mask);
            }
            Op::Exp(a) => acc(&mut grads[*a], dy * &self.nodes[i].value),
            Op::SoftmaxRow(a) => {
                let y = &self.nodes[i].value;
                let mut dx = dy * y;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.sum();
                    drow.zip_mut_with(&yrow, |d, &yv| *d -= dot * yv);
                }
                acc(&mut grads[*a], dx);
            }
            Op::LogSoftmaxRow(a) => {
                let y = &self.nodes[i].value;
                let mut dx = dy.clone();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let total: f64 = drow.sum();
                    drow.zip_mut_with(&yrow, |d, &yv| *d -= total * yv.exp());
                }
                acc(&mut grads[*a], dx);
            }
            Op::LayerNormRow(a) => {
                let x = self.value(*a);
                let y = &self.nodes[i].value;
                let mut dx = dy.clone();
                for ((mut drow, yrow), xrow) in
                    dx.rows_mut().into_iter().zip(y.rows()).zip(x.rows())
                {
                    let n = xrow.len() as f64;
                    let mean = xrow.mean().unwrap();
                    let var = xrow.mapv(|v| (v - mean).powi(2)).mean().unwrap();
                    let denom = (var + LAYER_NORM_EPS).sqrt();
                    let mean_dy: f64 = drow.sum() / n;
                    let mean_dyy: f64 =
                        drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum::<f64>() / n;
                    for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                        *d = (*d - mean_dy - yv * mean_dyy) / denom;
                    }
                }
                acc(&mut grads[*a], dx);
            }
            Op::GatherRows(a, indices) => {
                let mut dx = Array2::zeros(self.value(*a).dim());
                for (r, &src_row) in indices.iter().enumerate() {
                    let mut target = dx.row_mut(src_row);
                    target += &dy.row(r);
                }
                acc(&mut grads[*a], dx);
            }
            Op::GatherEntries(a, coords) => {
                let mut dx = Array2::zeros(self.value(*a).dim());
                for (k, &coord) in coords.iter().enumerate() {
                    dx[coord] += dy[(k, 0)];
                }
                acc(&mut grads[*a], dx);
            }
            Op::SumAll(a) => {
                acc(&mut grads[*a], Array2::from_elem(self.value(*a).dim(), dy[(0, 0)]));
            }
            Op::LinComb(terms) => {
                for (v, c) in terms {
                    acc(&mut grads[*v], Array2::from_elem((1, 1), c * dy[(0, 0)]));
                }
            }
            Op::ConcatCols(a, b) => {
                let na = self.value(*a).ncols();
                acc(&mut grads[*a], dy.slice(ndarray::s![.., ..na]).to_owned());
                acc(&mut grads[*b], dy.slice(ndarray::s![.., na..]).to_owned());
            }
        }
    }
}

/// Compares tape gradients of a scalar-valued function against central finite
/// differences over every entry of every input; returns the largest relative
/// error (absolute-floored at 1).
pub fn gradient_check<F>(build: F, inputs: &[Array2<f64>], h: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |points: &[Array2<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|x| tape.input(x.clone())).collect();
        let root = build(&mut tape, &vars);
        assert_eq!(tape.value(root).dim(), (1, 1), "function must be scalar");
        tape.value(root)[(0, 0)]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root);

    let mut max_err = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let grad = grads.wrt(vars[k], x.dim());
        for ((i, j), _) in x.indexed_iter() {
            let mut plus = inputs.to_vec();
            plus[k][(i, j)] += h;
            let mut minus = inputs.to_vec();
            minus[k][(i, j)] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let g = grad[(i, j)];
            let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1.0);
            max_err = max_err.max(err);
        }
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_stream;
    use ndarray::array;
    use rand::Rng;

    fn randn(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
        let mut m = Array2::zeros((n, d));
        for v in m.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn forward_values_match_hand_computation() {
        let mut tape = Tape::new();
        let a = tape.input(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.input(array![[0.5, -1.0], [2.0, 0.0]]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &array![[4.5, -1.0], [9.5, -3.0]]);
        let r = tape.input(array![[10.0, 20.0]]);
        let d = tape.add_row(c, r);
        assert_eq!(tape.value(d), &array![[14.5, 19.0], [19.5, 17.0]]);
        let s = tape.sum_all(d);
        assert_eq!(tape.value(s)[(0, 0)], 70.0);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_oracle() {
        let mut tape = Tape::new();
        let a = tape.input(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let p = tape.softmax_row(a);
        let v = tape.value(p);
        for row in v.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        assert!((v[(0, 0)] - 1.0f64.exp() / z).abs() < 1e-12);
        assert!((v[(1, 1)] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let a = tape.input(array![[1e4, 1e4 - 1.0, -1e9]]);
        let lp = tape.log_softmax_row(a);
        let v = tape.value(lp);
        assert!(v.iter().all(|x| x.is_finite() || *x < 0.0));
        // exp of the first two entries should sum to ~1.
        let total: f64 = v.row(0).iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn every_primitive_op_passes_gradient_check() {
        let mut rng = rng_stream(31, 0);
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &[Var]) -> Var>, Vec<Array2<f64>>)> = vec![
            (
                "add-mul-sub",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let s = t.add(v[0], v[1]);
                    let m = t.mul(s, v[0]);
                    let d = t.sub(m, v[1]);
                    t.sum_all(d)
                }),
                vec![randn(&mut rng, 3, 4), randn(&mut rng, 3, 4)],
            ),
            (
                "matmul-transpose",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let bt = t.transpose(v[1]);
                    let p = t.matmul(v[0], bt);
                    t.sum_all(p)
                }),
                vec![randn(&mut rng, 3, 5), randn(&mut rng, 4, 5)],
            ),
            (
                "rows-cols-broadcast",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let a = t.add_row(v[0], v[1]);
                    let b = t.mul_row(a, v[1]);
                    let c = t.mul_col(b, v[2]);
                    let r = t.broadcast_rows(v[1], 3);
                    let d = t.add(c, r);
                    t.sum_all(d)
                }),
                vec![
                    randn(&mut rng, 3, 4),
                    randn(&mut rng, 1, 4),
                    randn(&mut rng, 3, 1),
                ],
            ),
            (
                "relu-exp-scale",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let r = t.relu(v[0]);
                    let e = t.exp(r);
                    let s = t.scale(e, 0.25);
                    t.sum_all(s)
                }),
                // Offset away from the ReLU kink so finite differences are clean.
                vec![randn(&mut rng, 3, 4).mapv(|x| x + 2.0 * x.signum())],
            ),
            (
                "softmax-weighted",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let p = t.softmax_row(v[0]);
                    let w = t.mul(p, v[1]);
                    t.sum_all(w)
                }),
                vec![randn(&mut rng, 4, 6), randn(&mut rng, 4, 6)],
            ),
            (
                "log-softmax-nll",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let lp = t.log_softmax_row(v[0]);
                    let picked = t.gather_entries(lp, &[(0, 1), (1, 4), (2, 0)]);
                    let s = t.sum_all(picked);
                    t.scale(s, -1.0)
                }),
                vec![randn(&mut rng, 3, 6)],
            ),
            (
                "layer-norm-affine",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let n = t.layer_norm_row(v[0]);
                    let g = t.mul_row(n, v[1]);
                    let b = t.add_row(g, v[2]);
                    t.sum_all(b)
                }),
                vec![
                    randn(&mut rng, 3, 8),
                    randn(&mut rng, 1, 8).mapv(|x| x + 1.5),
                    randn(&mut rng, 1, 8),
                ],
            ),
            (
                "gather-rows-embedding",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let e = t.gather_rows(v[0], &[2, 0, 2, 1]);
                    let m = t.mul(e, e);
                    t.sum_all(m)
                }),
                vec![randn(&mut rng, 4, 5)],
            ),
            (
                "concat-lincomb",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let c = t.concat_cols(v[0], v[1]);
                    let s1 = t.sum_all(c);
                    let m = t.mul(v[0], v[0]);
                    let s2 = t.sum_all(m);
                    t.lin_comb(&[(s1, 0.5), (s2, -2.0)])
                }),
                vec![randn(&mut rng, 3, 2), randn(&mut rng, 3, 4)],
            ),
        ];
        for (name, build, inputs) in cases {
            let err = gradient_check(|t, v| build(t, v), &inputs, 1e-5);
            assert!(err < 1e-7, "{name}: max relative gradient error {err}");
        }
    }

    #[test]
    fn composite_attention_block_passes_gradient_check() {
        let mut rng = rng_stream(32, 0);
        // Single-head scaled dot-product attention with an additive mask,
        // residual, layer norm, and a relu feed-forward.
        let inputs = vec![
            randn(&mut rng, 4, 6),  // x
            randn(&mut rng, 6, 6),  // wq
            randn(&mut rng, 6, 6),  // wk
            randn(&mut rng, 6, 6),  // wv
            randn(&mut rng, 6, 12), // w1
            randn(&mut rng, 12, 6), // w2
        ];
        let mask = {
            let mut m = Array2::zeros((4, 4));
            for i in 0..4 {
                for j in i + 1..4 {
                    m[(i, j)] = -1e9;
                }
            }
            m
        };
        let err = gradient_check(
            move |t, v| {
                let q = t.matmul(v[0], v[1]);
                let k = t.matmul(v[0], v[2]);
                let val = t.matmul(v[0], v[3]);
                let kt = t.transpose(k);
                let scores = t.matmul(q, kt);
                let scaled = t.scale(scores, 1.0 / (6.0f64).sqrt());
                let mask_in = t.input(mask.clone());
                let masked = t.add(scaled, mask_in);
                let attn = t.softmax_row(masked);
                let ctx = t.matmul(attn, val);
                let res = t.add(v[0], ctx);
                let normed = t.layer_norm_row(res);
                let h = t.matmul(normed, v[4]);
                let h = t.relu(h);
                let out = t.matmul(h, v[5]);
                let res2 = t.add(normed, out);
                let final_ln = t.layer_norm_row(res2);
                t.sum_all(final_ln)
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-6, "attention block gradient error {err}");
    }

    #[test]
    fn split_tapes_reproduce_single_tape_gradients() {
        let mut rng = rng_stream(33, 0);
        let x = randn(&mut rng, 3, 4);
        let w1 = randn(&mut rng, 4, 5);
        let w2 = randn(&mut rng, 5, 2);

        // One tape end to end.
        let mut full = Tape::new();
        let (xv, w1v, w2v) = (
            full.input(x.clone()),
            full.input(w1.clone()),
            full.input(w2.clone()),
        );
        let h = full.matmul(xv, w1v);
        let h = full.relu(h);
        let o = full.matmul(h, w2v);
        let loss = full.sum_all(o);
        let g_full = full.backward(loss);

        // Upstream tape producing h, downstream tape consuming it.
        let mut up = Tape::new();
        let (xu, w1u) = (up.input(x.clone()), up.input(w1.clone()));
        let hu = up.matmul(xu, w1u);
        let hu = up.relu(hu);
        let h_val = up.value(hu).clone();

        let mut down = Tape::new();
        let (hd, w2d) = (down.input(h_val), down.input(w2.clone()));
        let od = down.matmul(hd, w2d);
        let loss_d = down.sum_all(od);
        let g_down = down.backward(loss_d);
        let g_up = up.backward_seeded(hu, g_down.get(hd).unwrap().clone());

        let diff_w1 = (&g_full.wrt(w1v, w1.dim()) - &g_up.wrt(w1u, w1.dim()))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let diff_w2 = (&g_full.wrt(w2v, w2.dim()) - &g_down.wrt(w2d, w2.dim()))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff_w1 < 1e-12 && diff_w2 < 1e-12);
    }

    #[test]
    fn gradient_descent_fits_linear_map() {
        let mut rng = rng_stream(34, 0);
        let x = randn(&mut rng, 40, 1);
        let y = x.mapv(|v| 3.0 * v);
        let mut w = Array2::from_elem((1, 1), 0.0);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let wv = tape.input(w.clone());
            let yv = tape.input(y.clone());
            let pred = tape.matmul(xv, wv);
            let err = tape.sub(pred, yv);
            let sq = tape.mul(err, err);
            let loss = tape.sum_all(sq);
            let loss_mean = tape.scale(loss, 1.0 / 40.0);
            let grads = tape.backward(loss_mean);
            w -= &(grads.wrt(wv, w.dim()) * 0.3);
        }
        assert!((w[(0, 0)] - 3.0).abs() < 1e-6, "fitted {}", w[(0, 0)]);
    }

    #[test]
    fn unused_inputs_report_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.input(array![[1.0]]);
        let b = tape.input(array![[2.0]]);
        let s = tape.scale(a, 2.0);
        let g = tape.backward(s);
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(b, (1, 1)), Array2::<f64>::zeros((1, 1)));
        assert_eq!(g.wrt(a, (1, 1))[(0, 0)], 2.0);
    }
}
