//! A small reverse-mode automatic differentiation tape over `f64` vectors.
//!
//! Parameters live in a [`ParamStore`] and are referenced from the tape by
//! [`ParamId`], so a forward pass never copies weight matrices. Every tape
//! value is a flat vector; scalars are vectors of length one.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;

/// Dense row-major matrix (a vector is a `1 x n` or `n x 1` matrix).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            tensors: store.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        math::sqrt(
            self.tensors
                .iter()
                .flat_map(|t| t.iter())
                .map(|x| x * x)
                .sum(),
        )
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0]
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    ParamRow { param: ParamId, row: usize },
    Param { param: ParamId },
    Affine { w: ParamId, b: Option<ParamId>, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Dot(Var, Var),
    Stack(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    LnFloor { x: Var, floor: f64 },
    Pick { x: Var, index: usize },
    WeightedSum { weights: Var, items: Vec<Var> },
    Sum(Vec<Var>),
    SumElems(Var),
    Cosine(Var, Var),
}

/// A forward computation recorded for reverse-mode differentiation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    values: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            values: Vec::with_capacity(1024),
            ops: Vec::with_capacity(1024),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param_row(&mut self, param: ParamId, row: usize) -> Var {
        let value = self.params.get(param).row(row).to_vec();
        self.push(value, Op::ParamRow { param, row })
    }

    /// Whole parameter tensor as a flat vector.
    pub fn param(&mut self, param: ParamId) -> Var {
        let value = self.params.get(param).data.clone();
        self.push(value, Op::Param { param })
    }

    /// `W x + b` for a `rows x cols` weight.
    pub fn affine(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Var {
        let wt = self.params.get(w);
        let xv = &self.values[x.0];
        debug_assert_eq!(wt.cols, xv.len(), "affine shape mismatch");
        let mut out = match b {
            Some(b) => self.params.get(b).data.clone(),
            None => vec![0.0; wt.rows],
        };
        for (r, o) in out.iter_mut().enumerate() {
            *o += math::dot(wt.row(r), xv);
        }
        self.push(out, Op::Affine { w, b, x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.values[a.0].iter().map(|x| x * factor).collect();
        self.push(v, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.values[a.0].iter().map(|x| x + c).collect();
        self.push(v, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].iter().map(|&x| math::sigmoid(x)).collect();
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].iter().map(|&x| math::tanh(x)).collect();
        self.push(v, Op::Tanh(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(&self.values[p.0]);
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.values[x.0][start..start + len].to_vec();
        self.push(v, Op::Slice { x, start })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = math::dot(&self.values[a.0], &self.values[b.0]);
        self.push(vec![v], Op::Dot(a, b))
    }

    /// Collects scalars into one vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Var {
        let v = scalars.iter().map(|s| self.values[s.0][0]).collect();
        self.push(v, Op::Stack(scalars.to_vec()))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = math::softmax(&self.values[x.0]);
        self.push(v, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xs = &self.values[x.0];
        let lse = math::log_sum_exp(xs);
        let v = xs.iter().map(|&z| z - lse).collect();
        self.push(v, Op::LogSoftmax(x))
    }

    /// Elementwise `ln(max(x, floor))`; no gradient flows where the floor binds.
    pub fn ln_floor(&mut self, x: Var, floor: f64) -> Var {
        let v = self.values[x.0]
            .iter()
            .map(|&z| math::ln(if z > floor { z } else { floor }))
            .collect();
        self.push(v, Op::LnFloor { x, floor })
    }

    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        let v = self.values[x.0][index];
        self.push(vec![v], Op::Pick { x, index })
    }

    /// `sum_i weights[i] * items[i]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Var {
        let w = &self.values[weights.0];
        debug_assert_eq!(w.len(), items.len());
        let dim = self.values[items[0].0].len();
        let mut v = vec![0.0; dim];
        for (wi, item) in w.iter().zip(items) {
            for (o, x) in v.iter_mut().zip(&self.values[item.0]) {
                *o += wi * x;
            }
        }
        self.push(v, Op::WeightedSum {
            weights,
            items: items.to_vec(),
        })
    }

    /// Elementwise sum of equally shaped values.
    pub fn sum(&mut self, items: &[Var]) -> Var {
        let mut v = self.values[items[0].0].clone();
        for item in &items[1..] {
            for (o, x) in v.iter_mut().zip(&self.values[item.0]) {
                *o += x;
            }
        }
        self.push(v, Op::Sum(items.to_vec()))
    }

    pub fn mean(&mut self, items: &[Var]) -> Var {
        let s = self.sum(items);
        self.scale(s, 1.0 / items.len() as f64)
    }

    pub fn sum_elems(&mut self, x: Var) -> Var {
        let v: f64 = self.values[x.0].iter().sum();
        self.push(vec![v], Op::SumElems(x))
    }

    /// Cosine similarity. Callers must reject zero-norm inputs first.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let v = math::dot(av, bv) / (math::norm(av) * math::norm(bv));
        self.push(vec![v], Op::Cosine(a, b))
    }

    /// Back-propagates d`out`/d(param) into `grads`. `out` must be a scalar.
    pub fn backward(&self, out: Var, grads: &mut Grads) {
        debug_assert_eq!(self.values[out.0].len(), 1);
        self.backward_seeded(out, vec![1.0], grads);
    }

    pub fn backward_seeded(&self, out: Var, seed: Vec<f64>, grads: &mut Grads) {
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); out.0 + 1];
        adj[out.0] = seed;
        for i in (0..=out.0).rev() {
            if adj[i].is_empty() {
                continue;
            }
            let g = core::mem::take(&mut adj[i]);
            self.propagate(i, &g, &mut adj, grads);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Vec<f64>], grads: &mut Grads) {
        match &self.ops[i] {
            Op::Input => {}
            Op::ParamRow { param, row } => {
                let cols = self.params.get(*param).cols;
                let dst = &mut grads.tensors[param.0][row * cols..(row + 1) * cols];
                axpy(dst, 1.0, g);
            }
            Op::Param { param } => axpy(&mut grads.tensors[param.0], 1.0, g),
            Op::Affine { w, b, x } => {
                let wt = self.params.get(*w);
                let xv = &self.values[x.0];
                {
                    let dw = &mut grads.tensors[w.0];
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            axpy(&mut dw[r * wt.cols..(r + 1) * wt.cols], gr, xv);
                        }
                    }
                }
                if let Some(b) = b {
                    axpy(&mut grads.tensors[b.0], 1.0, g);
                }
                let dx = slot(adj, *x, wt.cols);
                for (r, &gr) in g.iter().enumerate() {
                    if gr != 0.0 {
                        axpy(dx, gr, wt.row(r));
                    }
                }
            }
            Op::Add(a, b) => {
                let n = g.len();
                axpy(slot(adj, *a, n), 1.0, g);
                axpy(slot(adj, *b, n), 1.0, g);
            }
            Op::Sub(a, b) => {
                let n = g.len();
                axpy(slot(adj, *a, n), 1.0, g);
                axpy(slot(adj, *b, n), -1.0, g);
            }
            Op::Mul(a, b) => {
                let n = g.len();
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                let da = slot(adj, *a, n);
                for k in 0..n {
                    da[k] += g[k] * bv[k];
                }
                let db = slot(adj, *b, n);
                for k in 0..n {
                    db[k] += g[k] * av[k];
                }
            }
            Op::Scale(a, f) => axpy(slot(adj, *a, g.len()), *f, g),
            Op::AddScalar(a) => axpy(slot(adj, *a, g.len()), 1.0, g),
            Op::Sigmoid(a) => {
                let y = &self.values[i];
                let da = slot(adj, *a, g.len());
                for k in 0..g.len() {
                    da[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }
            Op::Tanh(a) => {
                let y = &self.values[i];
                let da = slot(adj, *a, g.len());
                for k in 0..g.len() {
                    da[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.values[p.0].len();
                    axpy(slot(adj, *p, n), 1.0, &g[off..off + n]);
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let n = self.values[x.0].len();
                let dx = slot(adj, *x, n);
                axpy(&mut dx[*start..*start + g.len()], 1.0, g);
            }
            Op::Dot(a, b) => {
                let n = self.values[a.0].len();
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                axpy(slot(adj, *a, n), g[0], bv);
                axpy(slot(adj, *b, n), g[0], av);
            }
            Op::Stack(scalars) => {
                for (k, s) in scalars.iter().enumerate() {
                    slot(adj, *s, 1)[0] += g[k];
                }
            }
            Op::Softmax(x) => {
                let y = &self.values[i];
                let gy = math::dot(g, y);
                let dx = slot(adj, *x, g.len());
                for k in 0..g.len() {
                    dx[k] += y[k] * (g[k] - gy);
                }
            }
            Op::LogSoftmax(x) => {
                let y = &self.values[i];
                let gs: f64 = g.iter().sum();
                let dx = slot(adj, *x, g.len());
                for k in 0..g.len() {
                    dx[k] += g[k] - math::exp(y[k]) * gs;
                }
            }
            Op::LnFloor { x, floor } => {
                let xv = &self.values[x.0];
                let dx = slot(adj, *x, g.len());
                for k in 0..g.len() {
                    if xv[k] > *floor {
                        dx[k] += g[k] / xv[k];
                    }
                }
            }
            Op::Pick { x, index } => {
                let n = self.values[x.0].len();
                slot(adj, *x, n)[*index] += g[0];
            }
            Op::WeightedSum { weights, items } => {
                let w = &self.values[weights.0];
                let n = g.len();
                let mut dw = vec![0.0; w.len()];
                for (k, item) in items.iter().enumerate() {
                    dw[k] = math::dot(g, &self.values[item.0]);
                    axpy(slot(adj, *item, n), w[k], g);
                }
                axpy(slot(adj, *weights, w.len()), 1.0, &dw);
            }
            Op::Sum(items) => {
                for item in items {
                    axpy(slot(adj, *item, g.len()), 1.0, g);
                }
            }
            Op::SumElems(x) => {
                let n = self.values[x.0].len();
                for d in slot(adj, *x, n).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                let (na, nb) = (math::norm(av), math::norm(bv));
                let c = self.values[i][0];
                let n = av.len();
                // d cos / d a = b / (|a||b|) - cos * a / |a|^2
                let da: Vec<f64> = (0..n)
                    .map(|k| g[0] * (bv[k] / (na * nb) - c * av[k] / (na * na)))
                    .collect();
                let db: Vec<f64> = (0..n)
                    .map(|k| g[0] * (av[k] / (na * nb) - c * bv[k] / (nb * nb)))
                    .collect();
                axpy(slot(adj, *a, n), 1.0, &da);
                axpy(slot(adj, *b, n), 1.0, &db);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

fn slot(adj: &mut [Vec<f64>], v: Var, len: usize) -> &mut [f64] {
    let s = &mut adj[v.0];
    if s.is_empty() {
        *s = vec![0.0; len];
    }
    s
}
