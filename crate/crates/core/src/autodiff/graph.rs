use super::tensor::{matmul_at_kernel, matmul_bt_kernel, matmul_kernel};
use super::{AutodiffError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Square(Var),
    Sqrt(Var),
    Div(Var, Var),
    Dot(Var, Var),
    Log(Var),
    Exp(Var),
    Softmax(Var),
    CrossEntropy(Var, Vec<usize>),
    CosineDistance(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Every node that requires a
    /// gradient has an entry; nodes off the loss path get zeros.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rank_error(op: &'static str, a: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: vec![],
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(mismatch("matmul", ta, tb)),
        };
        let out = Tensor::matrix(m, n, matmul_kernel(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = match (ta.shape(), tb.shape()) {
            ([_, n], [nb]) if n == nb => *n,
            _ => return Err(mismatch("add_bias", ta, tb)),
        };
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|v| c * v);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(a);
        Ok(self.push(out, Op::Relu(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|v| v * v);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Square(a), rg))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Sqrt(a), rg))
    }

    /// Elementwise `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("div", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    /// Inner product of two 1-D tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 1 || ta.shape() != tb.shape() {
            return Err(mismatch("dot", ta, tb));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Exp(a), rg))
    }

    /// Softmax over the last axis of a 1-D or 2-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        let (_, n) = ta.as_rows().ok_or_else(|| rank_error("softmax", ta))?;
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(n) {
            data.extend(softmax_row(row));
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Per-row `−log softmax(logits)[target]`; output has one entry per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(logits);
        let (m, n) = t.as_rows().ok_or_else(|| rank_error("cross_entropy", t))?;
        if targets.len() != m {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut losses = Vec::with_capacity(m);
        for (row, &y) in t.data().chunks(n).zip(targets) {
            if y >= n {
                return Err(AutodiffError::TargetOutOfRange {
                    op: "cross_entropy",
                    target: y,
                    classes: n,
                });
            }
            losses.push(log_sum_exp(row) - row[y]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::vector(losses),
            Op::CrossEntropy(logits, targets.to_vec()),
            rg,
        ))
    }

    /// Per-row cosine distance `½(1 − a·b / (‖a‖‖b‖))` between matching rows
    /// of two equally shaped 1-D or 2-D tensors.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("cosine_distance", ta, tb));
        }
        let (m, _) = ta.as_rows().ok_or_else(|| rank_error("cosine_distance", ta))?;
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let (u, v) = (ta.row(r), tb.row(r));
            let (dot, nu, nv) = dot_norms(u, v);
            if nu == 0.0 || nv == 0.0 {
                return Err(AutodiffError::ZeroNorm {
                    op: "cosine_distance",
                    row: r,
                });
            }
            out.push(0.5 * (1.0 - dot / (nu * nv)));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::vector(out), Op::CosineDistance(a, b), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !lt.data()[0].is_finite() {
            return Err(AutodiffError::NonFiniteLoss(lt.data()[0]));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (o, d) in t.data_mut().iter_mut().zip(delta) {
                        *o += d;
                    }
                }
                slot @ None => {
                    *slot = Some(
                        Tensor::new(self.nodes[v.0].value.shape().to_vec(), delta)
                            .expect("gradient shape matches its node"),
                    )
                }
            }
        };
        let gd = g.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    acc(*a, matmul_bt_kernel(gd, tb.data(), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, matmul_at_kernel(ta.data(), gd, m, k, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::AddBias(a, bias) => {
                acc(*a, gd.to_vec());
                let n = val(*bias).len();
                let mut gb = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*bias, gb);
            }
            Op::Scale(a, c) => acc(*a, gd.iter().map(|v| c * v).collect()),
            Op::Relu(a) => acc(
                *a,
                val(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(a) => acc(*a, vec![gd[0]; val(*a).len()]),
            Op::Square(a) => acc(
                *a,
                val(*a).data().iter().zip(gd).map(|(x, gv)| 2.0 * x * gv).collect(),
            ),
            Op::Sqrt(a) => acc(
                *a,
                node.value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(y, gv)| gv / (2.0 * y))
                    .collect(),
            ),
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, tb.data().iter().zip(gd).map(|(y, gv)| gv / y).collect());
                acc(
                    *b,
                    ta.data()
                        .iter()
                        .zip(tb.data())
                        .zip(gd)
                        .map(|((x, y), gv)| -gv * x / (y * y))
                        .collect(),
                );
            }
            Op::Dot(a, b) => {
                let s = gd[0];
                acc(*a, val(*b).data().iter().map(|v| s * v).collect());
                acc(*b, val(*a).data().iter().map(|v| s * v).collect());
            }
            Op::Log(a) => acc(
                *a,
                val(*a).data().iter().zip(gd).map(|(x, gv)| gv / x).collect(),
            ),
            Op::Exp(a) => acc(
                *a,
                node.value.data().iter().zip(gd).map(|(y, gv)| gv * y).collect(),
            ),
            Op::Softmax(a) => {
                let (_, n) = node.value.as_rows().expect("softmax output is 1-D or 2-D");
                let mut out = Vec::with_capacity(gd.len());
                for (y, gr) in node.value.data().chunks(n).zip(gd.chunks(n)) {
                    let inner: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    out.extend(y.iter().zip(gr).map(|(p, q)| p * (q - inner)));
                }
                acc(*a, out);
            }
            Op::CrossEntropy(logits, targets) => {
                let t = val(*logits);
                let (_, n) = t.as_rows().expect("cross_entropy input is 1-D or 2-D");
                let mut out = Vec::with_capacity(t.len());
                for ((row, &y), &gv) in t.data().chunks(n).zip(targets).zip(gd) {
                    let p = softmax_row(row);
                    out.extend(
                        p.iter()
                            .enumerate()
                            .map(|(j, pj)| gv * (pj - if j == y { 1.0 } else { 0.0 })),
                    );
                }
                acc(*logits, out);
            }
            Op::CosineDistance(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, n) = ta.as_rows().expect("cosine input is 1-D or 2-D");
                let mut ga = Vec::with_capacity(m * n);
                let mut gb = Vec::with_capacity(m * n);
                for r in 0..m {
                    let (u, v) = (ta.row(r), tb.row(r));
                    let (dot, nu, nv) = dot_norms(u, v);
                    let c = dot / (nu * nv);
                    let s = -0.5 * gd[r];
                    // ∂cos/∂u = v/(‖u‖‖v‖) − cos·u/‖u‖²
                    ga.extend(
                        u.iter()
                            .zip(v)
                            .map(|(ui, vi)| s * (vi / (nu * nv) - c * ui / (nu * nu))),
                    );
                    gb.extend(
                        u.iter()
                            .zip(v)
                            .map(|(ui, vi)| s * (ui / (nu * nv) - c * vi / (nv * nv))),
                    );
                }
                acc(*a, ga);
                acc(*b, gb);
            }
        }
    }
}

fn dot_norms(u: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    (dot, uu.sqrt(), vv.sqrt())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gradient of a scalar loss with respect to the input `x`.
///
/// `forward` receives a fresh graph and the input node (which requires a
/// gradient) and returns the scalar loss to differentiate.
pub fn grad_wrt_input<F>(x: &Tensor, forward: F) -> Result<Tensor, AutodiffError>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = forward(&mut g, xv)?;
    let grads = g.backward(loss)?;
    Ok(grads.get(xv).cloned().expect("input requires a gradient"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central differences of a scalar function of one tensor.
    fn numeric_grad(x: &Tensor, h: f64, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    /// Checks d(sum(w ⊙ op(inputs)))/d(input_i) against central differences
    /// for every input. `w` is a fixed random projection so non-scalar ops
    /// are covered.
    fn check_op(
        inputs: Vec<Tensor>,
        op: &dyn Fn(&mut Graph, &[Var]) -> Var,
        rng: &mut ChaCha8Rng,
    ) {
        let probe = {
            let mut g = Graph::new();
            let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = op(&mut g, &vs);
            g.value(out).shape().to_vec()
        };
        let w = random_tensor(rng, &probe, -1.0, 1.0);

        let eval = |ts: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let out = op(&mut g, &vs);
            g.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };

        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = op(&mut g, &vs);
        let wv = g.constant(w.clone());
        let weighted = weighted_sum(&mut g, out, wv);
        let grads = g.backward(weighted).unwrap();

        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vs[i]).unwrap().data().to_vec();
            let numeric = numeric_grad(t, 1e-5, &|p| {
                let mut ts = inputs.clone();
                ts[i] = p.clone();
                eval(&ts)
            });
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(rel_err(*a, *n) < 1e-4, "input {i}: analytic {a} vs numeric {n}");
            }
        }
    }

    /// sum(out ⊙ w) = ½ sum((out + w)² − out² − w²), built from primitives.
    fn weighted_sum(g: &mut Graph, out: Var, w: Var) -> Var {
        let s = g.add(out, w).unwrap();
        let s2 = g.square(s).unwrap();
        let o2 = g.square(out).unwrap();
        let neg_o2 = g.scale(o2, -1.0).unwrap();
        let w2 = g.square(w).unwrap();
        let neg_w2 = g.scale(w2, -1.0).unwrap();
        let t = g.add(s2, neg_o2).unwrap();
        let t = g.add(t, neg_w2).unwrap();
        let total = g.sum(t).unwrap();
        g.scale(total, 0.5).unwrap()
    }

    #[test]
    fn trivial_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn cosine_node_value_and_gradient() {
        // Central differences at (1,0),(0,1) with h = 1e-5 give (0, -0.5).
        let mut g = Graph::new();
        let u = g.param(Tensor::vector(vec![1.0, 0.0]));
        let v = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let d = g.cosine_distance(u, v).unwrap();
        assert_eq!(g.value(d).data(), &[0.5]);
        let s = g.sum(d).unwrap();
        let grads = g.backward(s).unwrap();
        let gu = grads.get(u).unwrap().data();
        assert!(gu[0].abs() < 1e-12);
        assert!((gu[1] + 0.5).abs() < 1e-12);

        let fd = numeric_grad(&Tensor::vector(vec![1.0, 0.0]), 1e-5, &|p| {
            crate::embedding::cosine_distance(p.data(), &[0.0, 1.0]).unwrap()
        });
        assert!(fd[0].abs() < 1e-8 && (fd[1] + 0.5).abs() < 1e-8);
    }

    #[test]
    fn errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(matches!(g.matmul(a, b), Err(AutodiffError::ShapeMismatch { op: "matmul", .. })));
        assert!(matches!(g.backward(a), Err(AutodiffError::NonScalarLoss(_))));
        assert!(matches!(
            g.cosine_distance(a, b),
            Err(AutodiffError::ZeroNorm { row: 0, .. })
        ));
        assert!(g.cross_entropy(a, &[0, 3]).is_err());
        let z = g.constant(Tensor::scalar(0.0));
        let l = g.log(z).unwrap();
        assert!(matches!(g.backward(l), Err(AutodiffError::NonFiniteLoss(_))));
    }

    #[test]
    fn absent_path_gradient_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.param(Tensor::vector(vec![3.0, 4.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
            let a = random_tensor(&mut rng, &[m, k], -1.0, 1.0);
            let b = random_tensor(&mut rng, &[k, n], -1.0, 1.0);
            check_op(vec![a, b], &|g, v| g.matmul(v[0], v[1]).unwrap(), &mut rng);

            let a = random_tensor(&mut rng, &[m, n], -1.0, 1.0);
            let b = random_tensor(&mut rng, &[m, n], -1.0, 1.0);
            check_op(vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]).unwrap(), &mut rng);
            check_op(vec![a.clone(), b.clone()], &|g, v| g.cosine_distance(v[0], v[1]).unwrap(), &mut rng);

            let bias = random_tensor(&mut rng, &[n], -1.0, 1.0);
            check_op(vec![a.clone(), bias], &|g, v| g.add_bias(v[0], v[1]).unwrap(), &mut rng);
            check_op(vec![a.clone()], &|g, v| g.scale(v[0], -1.7).unwrap(), &mut rng);
            check_op(vec![a.clone()], &|g, v| g.sum(v[0]).unwrap(), &mut rng);
            check_op(vec![a.clone()], &|g, v| g.square(v[0]).unwrap(), &mut rng);
            check_op(vec![a.clone()], &|g, v| g.exp(v[0]).unwrap(), &mut rng);
            check_op(vec![a.clone()], &|g, v| g.softmax(v[0]).unwrap(), &mut rng);
            // keep relu inputs away from the kink
            let r = a.map(|x| if x.abs() < 1e-3 { 0.5 } else { x });
            check_op(vec![r], &|g, v| g.relu(v[0]).unwrap(), &mut rng);

            let pos = random_tensor(&mut rng, &[m, n], 0.5, 2.0);
            let pos2 = random_tensor(&mut rng, &[m, n], 0.5, 2.0);
            check_op(vec![pos.clone()], &|g, v| g.sqrt(v[0]).unwrap(), &mut rng);
            check_op(vec![pos.clone()], &|g, v| g.log(v[0]).unwrap(), &mut rng);
            check_op(vec![a.clone(), pos2], &|g, v| g.div(v[0], v[1]).unwrap(), &mut rng);

            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            check_op(
                vec![random_tensor(&mut rng, &[m, n], -3.0, 3.0)],
                &|g, v| g.cross_entropy(v[0], &targets).unwrap(),
                &mut rng,
            );

            let x = random_tensor(&mut rng, &[k], -1.0, 1.0);
            let y = random_tensor(&mut rng, &[k], -1.0, 1.0);
            check_op(vec![x, y], &|g, v| g.dot(v[0], v[1]).unwrap(), &mut rng);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, &[4, 5], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        let run = || {
            let mut g = Graph::new();
            let av = g.param(a.clone());
            let bv = g.param(b.clone());
            let c = g.matmul(av, bv).unwrap();
            let r = g.relu(c).unwrap();
            let s = g.softmax(r).unwrap();
            let l = g.sum(s).unwrap();
            let grads = g.backward(l).unwrap();
            (grads.get(av).unwrap().clone(), grads.get(bv).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_wrt_input_of_linear_model_is_weight() {
        let w = Tensor::vector(vec![0.3, -2.0, 1.5]);
        let x = Tensor::vector(vec![5.0, 1.0, -1.0]);
        let grad = grad_wrt_input(&x, |g, xv| {
            let wv = g.constant(w.clone());
            g.dot(wv, xv)
        })
        .unwrap();
        assert_eq!(grad, w);
        let signs: Vec<f64> = grad.data().iter().map(|v| v.signum()).collect();
        assert!(signs.iter().all(|s| [-1.0, 0.0, 1.0].contains(s)));
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn cosine_gradient_is_orthogonal_to_input(
            u in prop::collection::vec(-2.0f64..2.0, 2..8),
            seed in 0u64..1000,
        ) {
            prop_assume!(u.iter().map(|x| x * x).sum::<f64>() > 1e-2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..u.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-2);
            let mut g = Graph::new();
            let a = g.param(Tensor::vector(u.clone()));
            let b = g.constant(Tensor::vector(v));
            let d = g.cosine_distance(a, b).unwrap();
            let s = g.sum(d).unwrap();
            let grad = g.backward(s).unwrap().get(a).unwrap().clone();
            let along: f64 = grad.data().iter().zip(&u).map(|(x, y)| x * y).sum();
            prop_assert!(along.abs() < 1e-12);
        }
    }
}
