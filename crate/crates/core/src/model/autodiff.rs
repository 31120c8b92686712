//! Reverse-mode differentiation over dense f64 matrices.
//!
//! Values are computed eagerly as ops are recorded; `backward` walks the tape
//! in reverse. Sequences of several samples are stacked row-wise and only the
//! attention op looks at the block structure.

use ndarray::{s, Array1, Array2, Axis, Zip};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    /// Sum of all entries, as a 1x1 matrix.
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    /// Multi-head self-attention over `[q | k | v]` columns, one block of
    /// `rows / batch` rows per sample.
    Attention {
        qkv: Var,
        batch: usize,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    /// Mean over consecutive blocks of rows.
    MeanBlocks(Var, usize),
    /// Frobenius norm, as a 1x1 matrix.
    Norm(Var),
    /// Normalizes columns `start..start + len` of every row.
    NormalizeSlice(Var, usize, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let n = self.needs(&[a, b]);
        self.push(v, Op::MatMul(a, b), n)
    }

    /// `a + b` with the single row `b` broadcast over `a`'s rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "add_row expects a row vector");
        let v = self.value(a) + self.value(b);
        let n = self.needs(&[a, b]);
        self.push(v, Op::AddRow(a, b), n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        let n = self.needs(&[a, b]);
        self.push(v, Op::Add(a, b), n)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        let n = self.needs(&[a, b]);
        self.push(v, Op::Sub(a, b), n)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let n = self.needs(&[a, b]);
        self.push(v, Op::Mul(a, b), n)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let n = self.needs(&[a]);
        self.push(v, Op::Scale(a, k), n)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let n = self.needs(&[a]);
        self.push(v, Op::Gelu(a), n)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let n = self.needs(&[a]);
        self.push(v, Op::Sigmoid(a), n)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let n = self.needs(&[a]);
        self.push(v, Op::Tanh(a), n)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        let n = self.needs(&[a]);
        self.push(Array2::from_elem((1, 1), v), Op::Sum(a), n)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / d;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let out = &xhat * self.value(gamma) + self.value(beta);
        let n = self.needs(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, n)
    }

    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Var {
        let v = self.value(qkv);
        let (rows, cols) = v.dim();
        assert!(cols % 3 == 0 && rows % batch == 0, "attention input shape");
        let d = cols / 3;
        assert!(d % heads == 0, "heads must divide the width");
        let (t, dh) = (rows / batch, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((rows, d));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let r = b * t..(b + 1) * t;
            for h in 0..heads {
                let c = h * dh;
                let q = v.slice(s![r.clone(), c..c + dh]);
                let k = v.slice(s![r.clone(), d + c..d + c + dh]);
                let vv = v.slice(s![r.clone(), 2 * d + c..2 * d + c + dh]);
                let mut p = q.dot(&k.t()) * scale;
                for mut row in p.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
                    row.mapv_inplace(|x| (x - m).exp());
                    let z = row.sum();
                    row /= z;
                }
                out.slice_mut(s![r.clone(), c..c + dh]).assign(&p.dot(&vv));
                probs.push(p);
            }
        }
        let n = self.needs(&[qkv]);
        self.push(out, Op::Attention { qkv, batch, heads, probs }, n)
    }

    /// Rows of `a` in the order given by `idx` (repeats allowed).
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        let n = self.needs(&[a]);
        self.push(v, Op::Gather(a, idx), n)
    }

    /// Stacks matrices with equal column counts row-wise.
    pub fn concat(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat column mismatch");
        let n = self.needs(&parts);
        self.push(v, Op::Concat(parts), n)
    }

    pub fn mean_blocks(&mut self, a: Var, block: usize) -> Var {
        let av = self.value(a);
        assert!(block > 0 && av.nrows() % block == 0, "mean_blocks shape");
        let nb = av.nrows() / block;
        let mut v = Array2::zeros((nb, av.ncols()));
        for b in 0..nb {
            v.row_mut(b)
                .assign(&(av.slice(s![b * block..(b + 1) * block, ..]).sum_axis(Axis(0)) / block as f64));
        }
        let n = self.needs(&[a]);
        self.push(v, Op::MeanBlocks(a, block), n)
    }

    pub fn norm(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        let n = self.needs(&[a]);
        self.push(Array2::from_elem((1, 1), v), Op::Norm(a), n)
    }

    pub fn normalize_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let mut sl = row.slice_mut(s![start..start + len]);
            let norm = sl.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            sl /= norm;
        }
        let n = self.needs(&[a]);
        self.push(v, Op::NormalizeSlice(a, start, len), n)
    }

    /// Sums 1x1 scalars.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Gradients of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, d: Array2<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(x) => *x += &d,
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::Gelu(a) => {
                let mut d = self.value(*a).clone();
                Zip::from(&mut d).and(g).for_each(|x, &gy| {
                    let u = GELU_C * (*x + 0.044715 * *x * *x * *x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * *x * *x);
                    *x = gy * (0.5 * (1.0 + t) + 0.5 * *x * (1.0 - t * t) * du);
                });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = node.value.clone();
                Zip::from(&mut d).and(g).for_each(|s, &gy| *s = gy * *s * (1.0 - *s));
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let mut d = node.value.clone();
                Zip::from(&mut d).and(g).for_each(|t, &gy| *t = gy * (1.0 - *t * *t));
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, Array2::from_elem(self.value(*a).dim(), g[[0, 0]])),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                if self.nodes[x.0].needs_grad {
                    let dxhat = g * self.value(*gamma);
                    let d = xhat.ncols() as f64;
                    let sum = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dot = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dx = (dxhat * d - sum - xhat * &dot) * &(inv_std / d).insert_axis(Axis(1));
                    acc(*x, dx);
                }
            }
            Op::Attention { qkv, batch, heads, probs } => {
                let v = self.value(*qkv);
                let (rows, cols) = v.dim();
                let d = cols / 3;
                let (t, dh) = (rows / batch, d / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dqkv = Array2::zeros((rows, cols));
                for b in 0..*batch {
                    let r = b * t..(b + 1) * t;
                    for h in 0..*heads {
                        let c = h * dh;
                        let p = &probs[b * heads + h];
                        let q = v.slice(s![r.clone(), c..c + dh]);
                        let k = v.slice(s![r.clone(), d + c..d + c + dh]);
                        let vv = v.slice(s![r.clone(), 2 * d + c..2 * d + c + dh]);
                        let go = g.slice(s![r.clone(), c..c + dh]);
                        let dv = p.t().dot(&go);
                        let dp = go.dot(&vv.t());
                        let rowdot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                        let ds = (dp - rowdot) * p * scale;
                        dqkv.slice_mut(s![r.clone(), c..c + dh]).assign(&ds.dot(&k));
                        dqkv.slice_mut(s![r.clone(), d + c..d + c + dh]).assign(&ds.t().dot(&q));
                        dqkv.slice_mut(s![r.clone(), 2 * d + c..2 * d + c + dh]).assign(&dv);
                    }
                }
                acc(*qkv, dqkv);
            }
            Op::Gather(a, idx) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                for (row, &i) in idx.iter().enumerate() {
                    let mut dst = d.row_mut(i);
                    dst += &g.row(row);
                }
                acc(*a, d);
            }
            Op::Concat(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    acc(*p, g.slice(s![at..at + n, ..]).to_owned());
                    at += n;
                }
            }
            Op::MeanBlocks(a, block) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                for (b, grow) in g.rows().into_iter().enumerate() {
                    let share = &grow / *block as f64;
                    for r in b * block..(b + 1) * block {
                        d.row_mut(r).assign(&share);
                    }
                }
                acc(*a, d);
            }
            Op::Norm(a) => {
                let n = node.value[[0, 0]];
                let d = if n > 0.0 { self.value(*a) * (g[[0, 0]] / n) } else { Array2::zeros(self.value(*a).dim()) };
                acc(*a, d);
            }
            Op::NormalizeSlice(a, start, len) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for r in 0..x.nrows() {
                    let xs = x.slice(s![r, *start..start + len]);
                    let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let y = node.value.slice(s![r, *start..start + len]);
                    let gs = g.slice(s![r, *start..start + len]);
                    let proj = y.dot(&gs);
                    let dd = (&gs - &(&y * proj)) / norm;
                    d.slice_mut(s![r, *start..start + len]).assign(&dd);
                }
                acc(*a, d);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(f)/d(input) against central differences for one builder.
    fn check(inputs: Vec<Array2<f64>>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |vals: &[Array2<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|v| g.param(v.clone())).collect();
            let out = f(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
            for idx in 0..x.len() {
                let (r, c) = (idx / x.ncols(), idx % x.ncols());
                let mut plus = inputs.clone();
                plus[k][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[k][[r, c]] -= h;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let fd = (gp.scalar(op) - gm.scalar(om)) / (2.0 * h);
                let a = analytic[[r, c]];
                assert!((a - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "input {k} entry {idx}: {a} vs {fd}");
            }
        }
    }

    /// Reduces any matrix to a scalar with non-uniform weights.
    fn reduce(g: &mut Graph, x: Var, rng_seed: u64) -> Var {
        let (r, c) = g.value(x).dim();
        let w = random(&mut ChaCha8Rng::seed_from_u64(rng_seed), r, c);
        let w = g.constant(w);
        let y = g.mul(x, w);
        let y = g.add(y, w);
        g.norm(y)
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 1, 2)], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let m = g.add_row(m, v[2]);
            let m = g.gelu(m);
            let s = g.sigmoid(m);
            let t = g.scale(s, 1.7);
            let u = g.sub(t, m);
            let h = g.tanh(u);
            let a = reduce(g, h, 1);
            let b = g.sum(u);
            g.sum_scalars(&[a, b])
        });
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(&mut rng, 3, 5), random(&mut rng, 1, 5), random(&mut rng, 1, 5)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            reduce(g, y, 2)
        });
    }

    #[test]
    fn attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![random(&mut rng, 6, 12)], |g, v| {
            let y = g.attention(v[0], 2, 2);
            reduce(g, y, 3)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![random(&mut rng, 4, 3), random(&mut rng, 2, 3), random(&mut rng, 2, 5)], |g, v| {
            let c = g.concat(vec![v[0], v[1]]);
            let s = g.gather(c, vec![5, 0, 0, 3, 2, 1]);
            let m = g.mean_blocks(s, 3);
            let q = g.normalize_slice(v[2], 1, 3);
            let a = reduce(g, m, 4);
            let b = reduce(g, q, 5);
            g.sum_scalars(&[a, b])
        });
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = random(&mut rng, 4, 6);
        let v = x.slice(s![.., 4..6]).to_owned();
        let a = g.constant(x);
        let y = g.attention(a, 1, 1);
        let out = g.value(y).slice(s![.., 0..2]).to_owned();
        for o in out.rows() {
            for j in 0..2 {
                let col = v.column(j);
                let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
                let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                assert!(o[j] >= lo - 1e-12 && o[j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Array2::ones((2, 2)));
        let p = g.param(Array2::ones((2, 2)));
        let y = g.mul(c, p);
        let n = g.norm(y);
        let grads = g.backward(n);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
