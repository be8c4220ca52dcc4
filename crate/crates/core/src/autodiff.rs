//! Tape-based reverse-mode differentiation over small dense `f64` matrices.
//!
//! Every value is a 2-D array; vectors are `1 x d` rows and scalars are `1 x 1`.
//! Operations append to the tape in evaluation order, so the backward sweep is a
//! single reverse pass over the node list.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    ScaleRows(Var, Rc<[f64]>),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
        bias: Var,
    },
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    SoftmaxRows(Var),
    SelfAdversarial {
        scores: Var,
        positive: usize,
        negatives: Rc<[usize]>,
        weights: Vec<f64>,
        temperature: f64,
    },
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `xs / temperature`, computed with the usual max shift.
pub fn tempered_softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|&x| ((x - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
    params: HashMap<usize, Var>,
    relu_signature: Option<Vec<u64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a hash of every rectifier's active set, for kink detection in
    /// finite-difference checks.
    pub fn with_relu_signature() -> Self {
        Tape {
            relu_signature: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn relu_signature(&self) -> Option<&[u64]> {
        self.relu_signature.as_deref()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Inserts parameter `id` once per tape; later calls return the same node.
    pub fn param(&mut self, id: usize, value: &Array2<f64>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].dot(&self.values[b.0]);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.values[a.0] + &self.values[b.0];
        self.push(out, Op::Add(a, b))
    }

    /// `x + row`, broadcasting a `1 x d` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let out = &self.values[x.0] + &self.values[row.0];
        self.push(out, Op::AddRow(x, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.values[a.0] * &self.values[b.0];
        self.push(out, Op::Mul(a, b))
    }

    /// `x * col`, broadcasting an `n x 1` column across the columns of `x`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let out = &self.values[x.0] * &self.values[col.0];
        self.push(out, Op::MulCol(x, col))
    }

    /// Scales row `i` of `x` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Rc<[f64]>) -> Var {
        let mut out = self.values[x.0].clone();
        for (mut row, &f) in out.rows_mut().into_iter().zip(factors.iter()) {
            row *= f;
        }
        self.push(out, Op::ScaleRows(x, factors))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let input = &self.values[x.0];
        if let Some(sig) = self.relu_signature.as_mut() {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for &v in input.iter() {
                h ^= u64::from(v > 0.0);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            sig.push(h);
        }
        let out = input.mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Row-wise layer normalisation with learned `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let input = &self.values[x.0];
        let d = input.ncols() as f64;
        let mut xhat = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.dot(&row) / d;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let out = &(&xhat * &self.values[gain.0]) + &self.values[bias.0];
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            },
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[self.values[a.0].view(), self.values[b.0].view()])
            .expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.values[x.0].slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(x, start, end))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<[usize]>) -> Var {
        let out = self.values[x.0].select(Axis(0), &idx);
        self.push(out, Op::GatherRows(x, idx))
    }

    /// Sums row `k` of `x` into output row `idx[k]` of an `n_out`-row result.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Rc<[usize]>, n_out: usize) -> Var {
        let input = &self.values[x.0];
        let mut out = Array2::zeros((n_out, input.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            let mut dst = out.row_mut(i);
            dst += &input.row(k);
        }
        self.push(out, Op::ScatterAddRows(x, idx))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.values[x.0].clone();
        for mut row in out.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row /= z;
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Binary cross-entropy with a logistic link for one positive and a set of
    /// negatives, the negatives weighted by a softmax of their scores at
    /// `temperature`. `scores` is an `n x 1` column. The gradient flows through
    /// the weights as well.
    pub fn self_adversarial_loss(
        &mut self,
        scores: Var,
        positive: usize,
        negatives: Rc<[usize]>,
        temperature: f64,
    ) -> Var {
        let col = &self.values[scores.0];
        let neg: Vec<f64> = negatives.iter().map(|&i| col[[i, 0]]).collect();
        let weights = tempered_softmax(&neg, temperature);
        let loss = softplus(-col[[positive, 0]])
            + neg
                .iter()
                .zip(&weights)
                .map(|(&s, &w)| w * softplus(s))
                .sum::<f64>();
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SelfAdversarial {
                scores,
                positive,
                negatives,
                weights,
                temperature,
            },
        )
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.values[root.0].dim(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
            match &mut grads[v.0] {
                Some(g) => *g += &delta,
                slot @ None => *slot = Some(delta),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.values[b.0].t());
                    let db = self.values[a.0].t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(x, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, g);
                    acc(&mut grads, *row, dr);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.values[b.0];
                    let db = &g * &self.values[a.0];
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MulCol(x, col) => {
                    let dx = &g * &self.values[col.0];
                    let dc = (&g * &self.values[x.0]).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *col, dc);
                }
                Op::ScaleRows(x, factors) => {
                    let mut dx = g;
                    for (mut row, &f) in dx.rows_mut().into_iter().zip(factors.iter()) {
                        row *= f;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    Zip::from(&mut dx)
                        .and(&self.values[x.0])
                        .for_each(|d, &v| {
                            if v <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    xhat,
                    inv_std,
                    bias,
                } => {
                    let dbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dgain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let mut dx = &g * &self.values[gain.0];
                    let d = dx.ncols() as f64;
                    for ((mut row, xr), &is) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
                        let m1 = row.sum() / d;
                        let m2 = row.dot(&xr) / d;
                        Zip::from(&mut row).and(&xr).for_each(|r, &xh| {
                            *r = is * (*r - m1 - xh * m2);
                        });
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.values[a.0].ncols();
                    acc(&mut grads, *a, g.slice(s![.., ..ca]).to_owned());
                    acc(&mut grads, *b, g.slice(s![.., ca..]).to_owned());
                }
                Op::SliceCols(x, start, end) => {
                    let mut dx = Array2::zeros(self.values[x.0].raw_dim());
                    dx.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *x, dx);
                }
                Op::GatherRows(x, idx) => {
                    let mut dx = Array2::zeros(self.values[x.0].raw_dim());
                    for (k, &r) in idx.iter().enumerate() {
                        let mut dst = dx.row_mut(r);
                        dst += &g.row(k);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ScatterAddRows(x, idx) => {
                    let dx = g.select(Axis(0), idx);
                    acc(&mut grads, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.values[i];
                    let mut dx = &g * y;
                    for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let total = row.sum();
                        Zip::from(&mut row).and(&yr).for_each(|r, &yv| *r -= yv * total);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SelfAdversarial {
                    scores,
                    positive,
                    negatives,
                    weights,
                    temperature,
                } => {
                    let up = g[[0, 0]];
                    let col = &self.values[scores.0];
                    let mut ds = Array2::zeros(col.raw_dim());
                    ds[[*positive, 0]] -= up * sigmoid(-col[[*positive, 0]]);
                    // the weights depend on the scores too: d w_i / d s_j = w_i (δ_ij - w_j) / T
                    let sp: Vec<f64> = negatives.iter().map(|&n| softplus(col[[n, 0]])).collect();
                    let mean_sp: f64 = sp.iter().zip(weights).map(|(a, w)| a * w).sum();
                    for ((&n, &w), &spn) in negatives.iter().zip(weights).zip(&sp) {
                        ds[[n, 0]] += up * w * (sigmoid(col[[n, 0]]) + (spn - mean_sp) / temperature);
                    }
                    acc(&mut grads, *scores, ds);
                }
            }
        }
        Gradients { grads }
    }

    /// Pairs each parameter id used on this tape with its gradient (zero when
    /// the parameter did not influence the root).
    pub fn param_gradients(&self, grads: &Gradients) -> Vec<(usize, Array2<f64>)> {
        let mut out: Vec<(usize, Array2<f64>)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(self.values[v.0].raw_dim()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` around `x`, one coordinate at a time.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in ndarray::indices(x.raw_dim()) {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            g[idx] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
    }

    // A composite that touches every op; returns the scalar on a fresh tape.
    fn composite(x: &Array2<f64>, w: &Array2<f64>) -> (Tape, Var, Var, Var) {
        let mut t = Tape::new();
        let xv = t.param(0, x);
        let wv = t.param(1, w);
        let h = t.matmul(xv, wv); // 3x2
        let bias = t.constant(array![[0.1, -0.2]]);
        let h = t.add_row(h, bias);
        let gain = t.constant(array![[1.5, 0.7]]);
        let lb = t.constant(array![[0.05, 0.3]]);
        let h = t.layer_norm(h, gain, lb);
        let h = t.relu(h);
        let g = t.gather_rows(h, Rc::from(vec![2, 0, 2, 1]));
        let g = t.scale_rows(g, Rc::from(vec![0.5, -1.0, 2.0, 0.25]));
        let sc = t.scatter_add_rows(g, Rc::from(vec![0, 1, 1, 2]), 3);
        let cat = t.concat_cols(sc, xv);
        let sl = t.slice_cols(cat, 1, 4);
        let sm = t.softmax_rows(sl);
        let m = t.mul(sm, sl);
        let col = t.slice_cols(m, 0, 1);
        let mc = t.mul_col(m, col);
        let both = t.add(mc, m);
        let ones = t.constant(Array2::ones((3, 1)));
        let s = t.matmul(both, ones);
        let s3 = t.slice_cols(s, 0, 1);
        let loss = t.self_adversarial_loss(s3, 1, Rc::from(vec![0, 2]), 0.7);
        (t, loss, xv, wv)
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let x = array![[0.3, -1.2, 0.8], [1.1, 0.4, -0.5], [-0.7, 0.9, 0.2]];
        let w = array![[0.5, -0.3], [0.2, 0.8], [-0.6, 0.1]];
        let (t, loss, xv, wv) = composite(&x, &w);
        let g = t.backward(loss);
        let gx = g.get(xv).unwrap().clone();
        let gw = g.get(wv).unwrap().clone();
        let nx = numeric_grad(&x, |p| {
            let (t, l, _, _) = composite(p, &w);
            t.scalar(l)
        });
        let nw = numeric_grad(&w, |p| {
            let (t, l, _, _) = composite(&x, p);
            t.scalar(l)
        });
        assert!(close(&gx, &nx, 1e-6), "{gx:?}\n{nx:?}");
        assert!(close(&gw, &nw, 1e-6), "{gw:?}\n{nw:?}");
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut t = Tape::new();
        let a = t.param(0, &array![[1.0, 2.0]]);
        let _b = t.param(1, &array![[3.0]]);
        let ones = t.constant(array![[1.0], [1.0]]);
        let s = t.matmul(a, ones);
        let g = t.backward(s);
        let pg = t.param_gradients(&g);
        assert_eq!(pg[0].1, array![[1.0, 1.0]]);
        assert_eq!(pg[1].1, array![[0.0]]);
    }

    #[test]
    fn loss_at_zero_scores_is_two_ln_two() {
        let mut t = Tape::new();
        let s = t.constant(Array2::zeros((2, 1)));
        let l = t.self_adversarial_loss(s, 0, Rc::from(vec![1]), 1.0);
        assert!((t.scalar(l) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable_in_both_tails() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }
}
