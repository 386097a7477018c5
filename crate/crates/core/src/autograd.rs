//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every model in this crate is written as a sequence of [`Graph`] operations.
//! A graph is built fresh for each forward pass, then [`Graph::backward`]
//! walks it in reverse and returns gradients for every node that depends on a
//! trainable leaf. Vectors are represented as `1 × n` rows.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::survival::{self, Censorship};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    AddRow(Var, Var),
    /// Multiplies every row `i` of an `m × n` matrix by entry `i` of an `m × 1` column.
    MulCol(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Selu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    TopKMeanCols {
        x: Var,
        picks: Vec<Vec<usize>>,
    },
    Sum(Var),
    SurvivalNll {
        hazards: Var,
        interval: usize,
        censorship: Censorship,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Record of operations for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that gradients are propagated to.
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter. Binding the same name twice returns the same
    /// node so gradients from every use accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Array2<f64>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        v
    }

    /// Names and nodes of every bound parameter, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.param_order
            .iter()
            .map(move |name| (name.as_str(), self.params[name]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), g)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::MatMulT(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), g)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1×n row");
        let value = self.value(a) + self.value(row);
        let g = self.any_grad(&[a, row]);
        self.push(value, Op::AddRow(a, row), g)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col expects an m×1 column");
        let value = self.value(a) * self.value(col);
        let g = self.any_grad(&[a, col]);
        self.push(value, Op::MulCol(a, col), g)
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Affine(a, scale), g)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let g = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), g)
    }

    pub fn selu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(selu);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Selu(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Tanh(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), g)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Gelu(a), g)
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * inv;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let g = self.any_grad(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            g,
        )
    }

    /// Row-wise softmax. Columns whose `key_mask` entry is `false` get weight 0.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.outer_iter_mut() {
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| key_mask.is_none_or(|m| m[*j]))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if key_mask.is_none_or(|m| m[j]) {
                    *v = (*v - max).exp();
                    total += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.mapv_inplace(|v| v / total);
        }
        let g = self.any_grad(&[a]);
        self.push(value, Op::SoftmaxRows(a), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let g = self.any_grad(&[a]);
        self.push(value, Op::SliceCols(a, start), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let g = self.any_grad(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col mismatch");
        let g = self.any_grad(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), g)
    }

    /// Gathers rows by index; repeated indices are allowed.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        let g = self.any_grad(&[a]);
        self.push(value, Op::SelectRows(a, rows.to_vec()), g)
    }

    pub fn row(&mut self, a: Var, index: usize) -> Var {
        self.select_rows(a, &[index])
    }

    /// For every column, the mean of its `min(k, rows)` largest entries,
    /// returned as a `1 × cols` row. Ties resolve toward the lower row index.
    pub fn topk_mean_cols(&mut self, a: Var, k: usize) -> Var {
        let xv = self.value(a);
        let (rows, cols) = xv.dim();
        let kk = k.min(rows);
        let mut value = Array2::zeros((1, cols));
        let mut picks = Vec::with_capacity(cols);
        for j in 0..cols {
            let idx = top_indices(xv.column(j).to_vec(), kk);
            value[[0, j]] = idx.iter().map(|&i| xv[[i, j]]).sum::<f64>() / kk as f64;
            picks.push(idx);
        }
        let g = self.any_grad(&[a]);
        self.push(value, Op::TopKMeanCols { x: a, picks }, g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let g = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), g)
    }

    /// Discrete-time survival negative log-likelihood of a `1 × I_t` hazard row.
    pub fn survival_nll(&mut self, hazards: Var, interval: usize, censorship: Censorship) -> Var {
        let h = self.value(hazards).row(0).to_vec();
        let loss = survival::nll_value(&h, interval, censorship);
        let g = self.any_grad(&[hazards]);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SurvivalNll {
                hazards,
                interval,
                censorship,
            },
            g,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, up: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, up.dot(&val(*b).t()));
                }
                if needs(*b) {
                    accumulate(grads, *b, val(*a).t().dot(up));
                }
            }
            Op::MatMulT(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, up.dot(val(*b)));
                }
                if needs(*b) {
                    accumulate(grads, *b, up.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, up.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, up.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, up.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, -up);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, up * val(*b));
                }
                if needs(*b) {
                    accumulate(grads, *b, up * val(*a));
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    accumulate(grads, *a, up.clone());
                }
                if needs(*row) {
                    accumulate(grads, *row, up.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if needs(*a) {
                    accumulate(grads, *a, up * val(*col));
                }
                if needs(*col) {
                    let g = (up * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(grads, *col, g);
                }
            }
            Op::Affine(a, scale) => accumulate(grads, *a, up * *scale),
            Op::Relu(a) => {
                let g = ndarray::Zip::from(up)
                    .and(val(*a))
                    .map_collect(|u, x| if *x > 0.0 { *u } else { 0.0 });
                accumulate(grads, *a, g);
            }
            Op::Selu(a) => {
                let g = ndarray::Zip::from(up)
                    .and(val(*a))
                    .map_collect(|u, x| u * selu_grad(*x));
                accumulate(grads, *a, g);
            }
            Op::Tanh(a) => {
                let g = ndarray::Zip::from(up)
                    .and(&node.value)
                    .map_collect(|u, y| u * (1.0 - y * y));
                accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = ndarray::Zip::from(up)
                    .and(&node.value)
                    .map_collect(|u, y| u * y * (1.0 - y));
                accumulate(grads, *a, g);
            }
            Op::Gelu(a) => {
                let g = ndarray::Zip::from(up)
                    .and(val(*a))
                    .map_collect(|u, x| u * gelu_grad(*x));
                accumulate(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if needs(*gamma) {
                    let g = (up * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *gamma, g);
                }
                if needs(*beta) {
                    accumulate(grads, *beta, up.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(*x) {
                    let dxhat = up * val(*gamma);
                    let cols = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for i in 0..xhat.nrows() {
                        let d = dxhat.row(i);
                        let xh = xhat.row(i);
                        let mean_d = d.sum() / cols;
                        let mean_dx = d.dot(&xh) / cols;
                        for j in 0..xhat.ncols() {
                            dx[[i, j]] = inv_std[i] * (d[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let mut g = up * p;
                for (mut row, prow) in g.outer_iter_mut().zip(p.outer_iter()) {
                    let total = row.sum();
                    row.zip_mut_with(&prow, |gv, pv| *gv -= pv * total);
                }
                accumulate(grads, *a, g);
            }
            Op::SliceCols(a, start) => {
                let mut g = Array2::zeros(val(*a).dim());
                g.slice_mut(s![.., *start..*start + up.ncols()]).assign(up);
                accumulate(grads, *a, g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if needs(*p) {
                        accumulate(grads, *p, up.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    if needs(*p) {
                        accumulate(grads, *p, up.slice(s![offset..offset + h, ..]).to_owned());
                    }
                    offset += h;
                }
            }
            Op::SelectRows(a, rows) => {
                let mut g = Array2::zeros(val(*a).dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = g.row_mut(r);
                    dst += &up.row(k);
                }
                accumulate(grads, *a, g);
            }
            Op::TopKMeanCols { x, picks } => {
                let mut g = Array2::zeros(val(*x).dim());
                for (j, idx) in picks.iter().enumerate() {
                    let share = up[[0, j]] / idx.len() as f64;
                    for &i in idx {
                        g[[i, j]] += share;
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::Sum(a) => {
                accumulate(grads, *a, Array2::from_elem(val(*a).dim(), up[[0, 0]]));
            }
            Op::SurvivalNll {
                hazards,
                interval,
                censorship,
            } => {
                let h = val(*hazards).row(0).to_vec();
                let dh = survival::nll_grad(&h, *interval, *censorship);
                let g = Array2::from_shape_vec((1, dh.len()), dh).expect("shape") * up[[0, 0]];
                accumulate(grads, *hazards, g);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Indices of the `k` largest values, ordered by descending value then
/// ascending index.
pub fn top_indices(values: Vec<f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044_715 * x.powi(3));
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f` at every entry of every input.
    fn check(inputs: Vec<Array2<f64>>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let run = |vals: &[Array2<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<_> = vals.iter().map(|v| g.variable(v.clone())).collect();
            let out = f(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = run(&inputs);
        let grads = g.backward(out);
        let h = 1e-6;
        for (n, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[n]).cloned().unwrap_or_else(|| Array2::zeros(input.dim()));
            for idx in 0..input.len() {
                let (r, c) = (idx / input.ncols(), idx % input.ncols());
                let mut plus = inputs.clone();
                plus[n][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[n][[r, c]] -= h;
                let (gp, _, op) = run(&plus);
                let (gm, _, om) = run(&minus);
                let numeric = (gp.scalar(op) - gm.scalar(om)) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {n} entry ({r},{c}): analytic {a} numeric {numeric}");
            }
        }
    }

    fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = g.shape(x);
        let w = g.constant(random(&mut rng, r, c));
        let p = g.mul(x, w);
        g.sum(p)
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 3, 4);
        check(vec![a.clone(), b.clone()], |g, v| {
            let s = g.add(v[0], v[1]);
            let d = g.sub(s, v[1]);
            let m = g.mul(d, v[1]);
            let t = g.tanh(m);
            let sg = g.sigmoid(t);
            let gl = g.gelu(sg);
            let se = g.selu(v[0]);
            let both = g.add(gl, se);
            let af = g.affine(both, -0.7, 0.3);
            weighted_sum(g, af, 9)
        });
    }

    #[test]
    fn matrix_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let c = random(&mut rng, 5, 4);
        let row = random(&mut rng, 1, 2);
        check(vec![a, b, c, row], |g, v| {
            let ab = g.matmul(v[0], v[1]);
            let ab = g.add_row(ab, v[3]);
            let act = g.matmul_t(v[2], v[0]);
            let sm = g.softmax_rows(act, Some(&[true, false, true]));
            let mixed = g.matmul(sm, ab);
            let left = g.slice_cols(mixed, 1, 1);
            let col = g.mul_col(mixed, left);
            let cat = g.concat_cols(&[col, left]);
            let rows = g.select_rows(cat, &[4, 0, 4]);
            let stacked = g.concat_rows(&[rows, cat]);
            weighted_sum(g, stacked, 3)
        });
    }

    #[test]
    fn layer_norm_and_pooling_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 5, 6);
        let gamma = random(&mut rng, 1, 6);
        let beta = random(&mut rng, 1, 6);
        check(vec![x, gamma, beta], |g, v| {
            let ln = g.layer_norm(v[0], v[1], v[2], 1e-5);
            let pooled = g.topk_mean_cols(ln, 2);
            weighted_sum(g, pooled, 5)
        });
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0, 3.0], [0.0, -5.0, 10.0]]);
        let p = g.softmax_rows(x, Some(&[true, true, false]));
        for row in g.value(p).outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert_eq!(row[2], 0.0);
        }
    }

    #[test]
    fn shared_param_accumulates_gradient() {
        let mut g = Graph::new();
        let w = array![[2.0]];
        let a = g.param("w", &w, true);
        let b = g.param("w", &w, true);
        assert_eq!(a, b);
        let prod = g.mul(a, b);
        let out = g.sum(prod);
        let grads = g.backward(out);
        assert_eq!(grads.get(a).unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(array![[1.0, 2.0]]);
        let v = g.variable(array![[3.0, 4.0]]);
        let m = g.mul(c, v);
        let out = g.sum(m);
        let grads = g.backward(out);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(v).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn top_indices_break_ties_by_index() {
        assert_eq!(top_indices(vec![1.0, 3.0, 3.0, 2.0], 3), vec![1, 2, 3]);
    }
}
