//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! Every forward operation appends a node holding its values and parents;
//! `backward` walks the tape in reverse, accumulating gradients for all
//! differentiable leaves. A tape may be differentiated at most once.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    Mse(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MeanAll(Var),
    SumAll(Var),
    SqrtGuard(Var),
    PairwiseDist(Var),
    DoubleCenter(Var),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by tape variable.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    /// Gradient of a differentiable leaf; zeros if the leaf was unreachable.
    pub fn of(&self, var: Var, len: usize) -> Vec<f64> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            values,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].values[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(
            self.nodes[v.0].shape.clone(),
            self.nodes[v.0].values.clone(),
        )
        .expect("tape node holds a consistent tensor")
    }

    /// Register a leaf. `differentiable` leaves receive gradients.
    pub fn leaf(&mut self, t: &Tensor, differentiable: bool) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.values().to_vec(),
            differentiable,
        )
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => Err(Error::shape(format!(
                "expected rank<=2 tensor, got {:?}",
                s
            ))),
        }
    }

    /// x: n x k, w: k x m -> n x m
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, k) = self.dims2(x)?;
        let (k2, m) = self.dims2(w)?;
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {} vs {}", k, k2)));
        }
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let a = xv[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let wrow = &wv[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += a * wrow[j];
                }
            }
        }
        let rg = self.requires(x) || self.requires(w);
        Ok(self.push(Op::MatMul(x, w), vec![n, m], out, rg))
    }

    /// Broadcast-add a length-m bias row to an n x m matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims2(x)?;
        if self.nodes[b.0].values.len() != m {
            return Err(Error::shape(format!(
                "bias len {} vs row width {}",
                self.nodes[b.0].values.len(),
                m
            )));
        }
        let mut out = self.nodes[x.0].values.clone();
        let bv = &self.nodes[b.0].values;
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += bv[j];
            }
        }
        let rg = self.requires(x) || self.requires(b);
        Ok(self.push(Op::AddRow(x, b), vec![n, m], out, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.requires(x);
        self.push(Op::Relu(x), shape, out, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.requires(x);
        self.push(Op::Tanh(x), shape, out, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero parts"));
        }
        let (n, _) = self.dims2(parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (np, mp) = self.dims2(p)?;
            if np != n {
                return Err(Error::shape(format!(
                    "batch-size mismatch in concat: {} vs {}",
                    n, np
                )));
            }
            widths.push(mp);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (idx, &p) in parts.iter().enumerate() {
                let m = widths[idx];
                out.extend_from_slice(&self.nodes[p.0].values[i * m..(i + 1) * m]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![n, total], out, rg))
    }

    /// Mean of squared elementwise differences over all entries.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.nodes[pred.0].shape != self.nodes[target.0].shape {
            return Err(Error::shape(format!(
                "mse shapes {:?} vs {:?}",
                self.nodes[pred.0].shape, self.nodes[target.0].shape
            )));
        }
        let p = &self.nodes[pred.0].values;
        let t = &self.nodes[target.0].values;
        let n = p.len() as f64;
        let v = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let rg = self.requires(pred) || self.requires(target);
        Ok(self.push(Op::Mse(pred, target), vec![1], vec![v], rg))
    }

    /// Mean over the batch of -log softmax(logits)[label], with log-sum-exp
    /// stabilization.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.dims2(logits)?;
        if labels.len() != n {
            return Err(Error::shape(format!(
                "{} labels for batch of {}",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!(
                "label {} out of range for {} classes",
                bad, k
            )));
        }
        let lv = &self.nodes[logits.0].values;
        let mut total = 0.0;
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        let rg = self.requires(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            vec![1],
            vec![total / n as f64],
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(format!(
                "{} shapes {:?} vs {:?}",
                what, self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), shape, out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub(a, b), shape, out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul(a, b), shape, out, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Div(a, b), shape, out, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a);
        self.push(Op::Scale(a, c), shape, out, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].values.len() as f64;
        let v = self.nodes[a.0].values.iter().sum::<f64>() / n;
        let rg = self.requires(a);
        self.push(Op::MeanAll(a), vec![1], vec![v], rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].values.iter().sum::<f64>();
        let rg = self.requires(a);
        self.push(Op::SumAll(a), vec![1], vec![v], rg)
    }

    /// Elementwise sqrt(max(x, 0)); gradient is zero in the guarded region.
    pub fn sqrt_guard(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|x| x.max(0.0).sqrt())
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a);
        self.push(Op::SqrtGuard(a), shape, out, rg)
    }

    /// n x d rows -> n x n matrix of pairwise Euclidean distances.
    pub fn pairwise_dist(&mut self, h: Var) -> Result<Var> {
        let (n, d) = self.dims2(h)?;
        let hv = &self.nodes[h.0].values;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let mut s = 0.0;
                for c in 0..d {
                    let diff = hv[i * d + c] - hv[j * d + c];
                    s += diff * diff;
                }
                let dist = s.sqrt();
                out[i * n + j] = dist;
                out[j * n + i] = dist;
            }
        }
        let rg = self.requires(h);
        Ok(self.push(Op::PairwiseDist(h), vec![n, n], out, rg))
    }

    /// Subtract row means and column means, add the grand mean.
    pub fn double_center(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2(a)?;
        if n != m {
            return Err(Error::shape("double_center expects a square matrix"));
        }
        let out = double_center_values(&self.nodes[a.0].values, n);
        let rg = self.requires(a);
        Ok(self.push(Op::DoubleCenter(a), vec![n, n], out, rg))
    }

    /// Backward from a scalar loss, seeding with 1.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_with(loss, &[1.0])
    }

    /// Backward from an arbitrary node with an explicit upstream gradient
    /// (vector-Jacobian product).
    pub fn backward_with(&mut self, out: Var, seed: &[f64]) -> Result<Grads> {
        if self.consumed {
            return Err(Error::contract("tape already differentiated"));
        }
        if seed.len() != self.nodes[out.0].values.len() {
            return Err(Error::shape(format!(
                "seed length {} vs output length {}",
                seed.len(),
                self.nodes[out.0].values.len()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.to_vec());

        for id in (0..=out.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => grads[v.0] = Some(contrib.to_vec()),
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(x, w) => {
                let xs = &self.nodes[x.0].shape;
                let (n, k) = if xs.len() == 1 {
                    (1, xs[0])
                } else {
                    (xs[0], xs[1])
                };
                let m = *self.nodes[w.0].shape.last().unwrap();
                let xv = &self.nodes[x.0].values;
                let wv = &self.nodes[w.0].values;
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[i * m + j] * wv[p * m + j];
                            }
                            gx[i * k + p] = s;
                        }
                    }
                    self.accumulate(grads, *x, &gx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut gw = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let a = xv[i * k + p];
                            if a == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                gw[p * m + j] += a * g[i * m + j];
                            }
                        }
                    }
                    self.accumulate(grads, *w, &gw);
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g);
                if self.nodes[b.0].requires_grad {
                    let m = self.nodes[b.0].values.len();
                    let n = g.len() / m;
                    let mut gb = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            gb[j] += g[i * m + j];
                        }
                    }
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].values;
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &gx);
            }
            Op::Tanh(x) => {
                let yv = &self.nodes[id].values;
                let gx: Vec<f64> = g
                    .iter()
                    .zip(yv)
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect();
                self.accumulate(grads, *x, &gx);
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[id].shape[0];
                let total = self.nodes[id].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let m = *self.nodes[p.0].shape.last().unwrap();
                    if self.nodes[p.0].requires_grad {
                        let mut gp = vec![0.0; n * m];
                        for i in 0..n {
                            gp[i * m..(i + 1) * m]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + m]);
                        }
                        self.accumulate(grads, p, &gp);
                    }
                    offset += m;
                }
            }
            Op::Mse(p, t) => {
                let pv = &self.nodes[p.0].values;
                let tv = &self.nodes[t.0].values;
                let n = pv.len() as f64;
                let up = g[0];
                if self.nodes[p.0].requires_grad {
                    let gp: Vec<f64> = pv
                        .iter()
                        .zip(tv)
                        .map(|(a, b)| up * 2.0 * (a - b) / n)
                        .collect();
                    self.accumulate(grads, *p, &gp);
                }
                if self.nodes[t.0].requires_grad {
                    let gt: Vec<f64> = pv
                        .iter()
                        .zip(tv)
                        .map(|(a, b)| -up * 2.0 * (a - b) / n)
                        .collect();
                    self.accumulate(grads, *t, &gt);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let k = *self.nodes[logits.0].shape.last().unwrap();
                let n = labels.len();
                let lv = &self.nodes[logits.0].values;
                let up = g[0];
                let mut gl = vec![0.0; n * k];
                for i in 0..n {
                    let row = &lv[i * k..(i + 1) * k];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - max).exp() / denom;
                        let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                        gl[i * k + j] = up * (p - onehot) / n as f64;
                    }
                }
                self.accumulate(grads, *logits, &gl);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                if self.nodes[b.0].requires_grad {
                    let gb: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].values)
                        .map(|(gi, bv)| gi * bv)
                        .collect();
                    self.accumulate(grads, *a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].values)
                        .map(|(gi, av)| gi * av)
                        .collect();
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Div(a, b) => {
                let av = &self.nodes[a.0].values;
                let bv = &self.nodes[b.0].values;
                if self.nodes[a.0].requires_grad {
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(gi, b)| gi / b).collect();
                    self.accumulate(grads, *a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gi, (a, b))| -gi * a / (b * b))
                        .collect();
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[a.0].requires_grad {
                    let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                    self.accumulate(grads, *a, &ga);
                }
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].values.len();
                let ga = vec![g[0] / n as f64; n];
                self.accumulate(grads, *a, &ga);
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].values.len();
                let ga = vec![g[0]; n];
                self.accumulate(grads, *a, &ga);
            }
            Op::SqrtGuard(a) => {
                let av = &self.nodes[a.0].values;
                let yv = &self.nodes[id].values;
                let ga: Vec<f64> = g
                    .iter()
                    .zip(av.iter().zip(yv))
                    .map(|(gi, (x, y))| if *x > 1e-12 { gi * 0.5 / y } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::PairwiseDist(h) => {
                let n = self.nodes[id].shape[0];
                let d = *self.nodes[h.0].shape.last().unwrap();
                let hv = &self.nodes[h.0].values;
                let dv = &self.nodes[id].values;
                let mut gh = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let dist = dv[i * n + j];
                        if dist <= 1e-12 {
                            continue;
                        }
                        let w = g[i * n + j] / dist;
                        for c in 0..d {
                            let diff = w * (hv[i * d + c] - hv[j * d + c]);
                            gh[i * d + c] += diff;
                            gh[j * d + c] -= diff;
                        }
                    }
                }
                self.accumulate(grads, *h, &gh);
            }
            Op::DoubleCenter(a) => {
                // The centering projection is symmetric, so the adjoint is
                // the same double centering applied to the upstream gradient.
                let n = self.nodes[id].shape[0];
                let ga = double_center_values(g, n);
                self.accumulate(grads, *a, &ga);
            }
        }
    }
}

pub(crate) fn double_center_values(a: &[f64], n: usize) -> Vec<f64> {
    let mut row_means = vec![0.0; n];
    let mut col_means = vec![0.0; n];
    let mut grand = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = a[i * n + j];
            row_means[i] += v;
            col_means[j] += v;
            grand += v;
        }
    }
    for v in row_means.iter_mut().chain(col_means.iter_mut()) {
        *v /= n as f64;
    }
    grand /= (n * n) as f64;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = a[i * n + j] - row_means[i] - col_means[j] + grand;
        }
    }
    out
}
