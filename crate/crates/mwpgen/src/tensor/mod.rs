//! Reverse-mode autodiff on a flat tape of 2-D row-major f64 tensors.
//!
//! A [`Tape`] is an append-only arena; every operation evaluates eagerly and
//! records enough to run the backward pass in reverse creation order (tape
//! order is always topological). Parameters live outside tapes in a
//! [`ParamStore`]; a tape binds a snapshot of each parameter it uses and
//! gradients are harvested back per store after `backward`.

pub mod gradcheck;

use crate::rng::{self, Stream};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Gaussian with the given standard deviation.
    Normal(f64),
}

/// Named, ordered set of trainable tensors plus Adam state. Stores are the
/// unit of optimization: stepping one store leaves every other store (and its
/// Adam moments) untouched, which is how freezing works.
pub struct ParamStore {
    name: String,
    entries: Vec<ParamEntry>,
    step: u64,
}

struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl ParamStore {
    pub fn new(name: &str) -> Self {
        ParamStore {
            name: name.to_string(),
            entries: Vec::new(),
            step: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn register(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut Stream,
    ) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let n = rows * cols;
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Normal(std) => (0..n).map(|_| rng::normal(rng) * std).collect(),
        };
        self.entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        let e = &self.entries[id.0];
        (e.rows, e.cols)
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Adam with bias correction. When `clip` is set, `grads` is rescaled in
    /// place so its global norm does not exceed it.
    pub fn adam_step(&mut self, grads: &mut Grads, lr: f64, clip: Option<f64>) {
        assert_eq!(grads.data.len(), self.entries.len(), "grads/store mismatch");
        if let Some(max_norm) = clip {
            let norm = grads.global_norm();
            if norm > max_norm {
                grads.scale(max_norm / norm);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (entry, g) in self.entries.iter_mut().zip(&grads.data) {
            for i in 0..entry.value.len() {
                entry.m[i] = ADAM_BETA1 * entry.m[i] + (1.0 - ADAM_BETA1) * g[i];
                entry.v[i] = ADAM_BETA2 * entry.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = entry.m[i] / bc1;
                let v_hat = entry.v[i] / bc2;
                entry.value[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }

    /// Raw access for checkpointing: (name, rows, cols, value, m, v).
    pub fn segments(&self) -> impl Iterator<Item = (&str, usize, usize, &[f64], &[f64], &[f64])> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.rows, e.cols, &e.value[..], &e.m[..], &e.v[..]))
    }

    /// Rebuilds a store from checkpoint segments. Order defines the ids.
    pub fn from_segments(
        name: &str,
        step: u64,
        segments: Vec<(String, usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)>,
    ) -> Self {
        let entries = segments
            .into_iter()
            .map(|(name, rows, cols, value, m, v)| {
                assert_eq!(value.len(), rows * cols, "segment {name} size mismatch");
                assert_eq!(m.len(), rows * cols);
                assert_eq!(v.len(), rows * cols);
                ParamEntry {
                    name,
                    rows,
                    cols,
                    value,
                    m,
                    v,
                }
            })
            .collect();
        ParamStore {
            name: name.to_string(),
            entries,
            step,
        }
    }
}

/// Per-parameter gradient buffers aligned with one store.
pub struct Grads {
    store_name: String,
    data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            store_name: store.name.clone(),
            data: store.entries.iter().map(|e| vec![0.0; e.value.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.data {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Concat(Vec<usize>),
    RowSlice { src: usize, start: usize },
    Gather { table: usize, indices: Vec<u32> },
    SoftmaxRows(usize),
    Sigmoid(usize),
    Log(usize),
    LayerNorm(usize),
    CrossEntropy { logits: usize, targets: Vec<u32>, ignore: Option<u32> },
    ScalarMul { src: usize, c: f64 },
    Sum(usize),
    Mean(usize),
    StraightThrough { src: usize },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
}

/// Append-only computation graph. Operations evaluate eagerly; `backward`
/// seeds the loss gradient and walks the arena once in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(String, ParamId, usize)>,
}

// b may match a's shape, be a single row (broadcast over rows), or a single
// element (broadcast over everything).
fn broadcast_ok(a: (usize, usize), b: (usize, usize)) -> bool {
    b == a || (b.0 == 1 && b.1 == a.1) || (b.0 == 1 && b.1 == 1)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> TensorRef {
        debug_assert_eq!(value.len(), rows * cols);
        let n = value.len();
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            grad: vec![0.0; n],
        });
        TensorRef(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: TensorRef) -> (usize, usize) {
        let n = &self.nodes[t.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, t: TensorRef) -> &[f64] {
        &self.nodes[t.0].value
    }

    pub fn grad(&self, t: TensorRef) -> &[f64] {
        &self.nodes[t.0].grad
    }

    pub fn scalar(&self, t: TensorRef) -> f64 {
        let n = &self.nodes[t.0];
        assert_eq!((n.rows, n.cols), (1, 1), "scalar() on non-scalar tensor");
        n.value[0]
    }

    /// Constant leaf; receives no harvested gradient but still accumulates
    /// one internally (useful for inputs-as-leaves tests).
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> TensorRef {
        assert_eq!(value.len(), rows * cols, "leaf size mismatch");
        self.push(Op::Leaf, rows, cols, value)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> TensorRef {
        self.push(Op::Leaf, 1, 1, vec![value])
    }

    /// Binds a snapshot of `store[id]`; gradients flow to this leaf and are
    /// collected by [`Tape::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorRef {
        let (rows, cols) = store.shape(id);
        let t = self.push(Op::Leaf, rows, cols, store.value(id).to_vec());
        self.bindings.push((store.name.clone(), id, t.0));
        t
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.elementwise(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.elementwise(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.elementwise(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    fn elementwise(
        &mut self,
        a: TensorRef,
        b: TensorRef,
        op: Op,
        f: fn(f64, f64) -> f64,
    ) -> TensorRef {
        let (ar, ac) = self.shape(a);
        let bs = self.shape(b);
        assert!(
            broadcast_ok((ar, ac), bs),
            "elementwise shape mismatch: {:?} vs {:?}",
            (ar, ac),
            bs
        );
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(ar * ac);
        for i in 0..ar {
            for j in 0..ac {
                let bval = if bs == (ar, ac) {
                    bv[i * ac + j]
                } else if bs == (1, ac) {
                    bv[j]
                } else {
                    bv[0]
                };
                out.push(f(av[i * ac + j], bval));
            }
        }
        self.push(op, ar, ac, out)
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims: ({m},{k}) x ({k2},{n})");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let a_il = av[i * k + l];
                let brow = &bv[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a_il * brow[j];
                }
            }
        }
        self.push(Op::Matmul(a.0, b.0), m, n, out)
    }

    pub fn transpose(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        self.push(Op::Transpose(a.0), c, r, out)
    }

    /// Stacks rows of the given tensors (all must share a column count).
    pub fn concat_rows(&mut self, parts: &[TensorRef]) -> TensorRef {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, cols, "concat column mismatch");
            rows += r;
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), rows, cols, out)
    }

    pub fn row_slice(&mut self, a: TensorRef, start: usize, len: usize) -> TensorRef {
        let (r, c) = self.shape(a);
        assert!(start + len <= r, "row_slice out of range");
        let out = self.nodes[a.0].value[start * c..(start + len) * c].to_vec();
        self.push(Op::RowSlice { src: a.0, start }, len, c, out)
    }

    /// Looks up one row of `table` per index.
    pub fn gather(&mut self, table: TensorRef, indices: &[u32]) -> TensorRef {
        let (r, c) = self.shape(table);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &idx in indices {
            assert!((idx as usize) < r, "gather index {idx} out of range {r}");
            let row = &self.nodes[table.0].value[idx as usize * c..(idx as usize + 1) * c];
            out.extend_from_slice(row);
        }
        self.push(
            Op::Gather { table: table.0, indices: indices.to_vec() },
            indices.len(),
            c,
            out,
        )
    }

    /// Numerically stable per-row softmax (max-subtracted).
    pub fn softmax_rows(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.shape(a);
        assert!(c > 0, "softmax over empty rows");
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                out[i * c + j] /= denom;
            }
        }
        self.push(Op::SoftmaxRows(a.0), r, c, out)
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(Op::Sigmoid(a.0), r, c, out)
    }

    /// Natural log. Non-positive inputs yield -inf/NaN, which the training
    /// loop detects as a numerical failure; nothing is clamped here.
    pub fn log(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| x.ln()).collect();
        self.push(Op::Log(a.0), r, c, out)
    }

    /// Per-row standardization with epsilon inside the square root; no affine
    /// part (compose with `mul`/`add` for gain and bias).
    pub fn layer_norm(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.shape(a);
        assert!(c > 0, "layer_norm over empty rows");
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv;
            }
        }
        self.push(Op::LayerNorm(a.0), r, c, out)
    }

    /// Mean of per-row `-log softmax(logits)[target]`, skipping rows whose
    /// target equals `ignore`. Requires at least one counted row.
    pub fn cross_entropy(
        &mut self,
        logits: TensorRef,
        targets: &[u32],
        ignore: Option<u32>,
    ) -> TensorRef {
        let (r, c) = self.shape(logits);
        assert_eq!(targets.len(), r, "one target per logit row");
        let lv = &self.nodes[logits.0].value;
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            assert!((t as usize) < c, "target {t} out of range {c}");
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
            count += 1;
        }
        assert!(count > 0, "cross_entropy: all rows ignored");
        self.push(
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), ignore },
            1,
            1,
            vec![total / count as f64],
        )
    }

    pub fn scalar_mul(&mut self, a: TensorRef, c: f64) -> TensorRef {
        let (r, cols) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        self.push(Op::ScalarMul { src: a.0, c }, r, cols, out)
    }

    pub fn sum(&mut self, a: TensorRef) -> TensorRef {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(Op::Sum(a.0), 1, 1, vec![s])
    }

    pub fn mean(&mut self, a: TensorRef) -> TensorRef {
        let n = self.nodes[a.0].value.len();
        assert!(n > 0, "mean of empty tensor");
        let s = self.nodes[a.0].value.iter().sum::<f64>() / n as f64;
        self.push(Op::Mean(a.0), 1, 1, vec![s])
    }

    /// Forward takes the provided hard samples; backward passes the gradient
    /// through to `probs` unchanged.
    pub fn straight_through(&mut self, probs: TensorRef, samples: &[f64]) -> TensorRef {
        let (r, c) = self.shape(probs);
        assert_eq!(samples.len(), r * c, "sample/prob size mismatch");
        self.push(Op::StraightThrough { src: probs.0 }, r, c, samples.to_vec())
    }

    /// Clears all gradients, seeds `d loss/d loss = 1`, and propagates in
    /// reverse creation order. May be called repeatedly on one tape with
    /// different roots; each call starts from zeroed gradients.
    pub fn backward(&mut self, loss: TensorRef) {
        {
            let n = &self.nodes[loss.0];
            assert_eq!((n.rows, n.cols), (1, 1), "backward from non-scalar");
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            self.backward_node(i);
        }
    }

    fn backward_node(&mut self, i: usize) {
        // Split borrows: take the node's grad out, write into earlier nodes.
        let grad = std::mem::take(&mut self.nodes[i].grad);
        if grad.iter().all(|&g| g == 0.0) {
            self.nodes[i].grad = grad;
            return;
        }
        let rows = self.nodes[i].rows;
        let cols = self.nodes[i].cols;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(a, &grad, 1.0);
                self.accumulate_reduced(b, &grad, rows, cols, 1.0);
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, &grad, 1.0);
                self.accumulate_reduced(b, &grad, rows, cols, -1.0);
            }
            &Op::Mul(a, b) => {
                let bs = (self.nodes[b].rows, self.nodes[b].cols);
                let (av, bv) = (self.nodes[a].value.clone(), self.nodes[b].value.clone());
                let ga = &mut self.nodes[a].grad;
                for idx in 0..grad.len() {
                    let c = idx % cols;
                    let bval = if bs == (rows, cols) {
                        bv[idx]
                    } else if bs == (1, cols) {
                        bv[c]
                    } else {
                        bv[0]
                    };
                    ga[idx] += grad[idx] * bval;
                }
                let gb = &mut self.nodes[b].grad;
                for idx in 0..grad.len() {
                    let c = idx % cols;
                    let contrib = grad[idx] * av[idx];
                    if bs == (rows, cols) {
                        gb[idx] += contrib;
                    } else if bs == (1, cols) {
                        gb[c] += contrib;
                    } else {
                        gb[0] += contrib;
                    }
                }
            }
            &Op::Matmul(a, b) => {
                let k = self.nodes[a].cols;
                let n = cols;
                let m = rows;
                let av = self.nodes[a].value.clone();
                let bv = self.nodes[b].value.clone();
                {
                    let ga = &mut self.nodes[a].grad;
                    // dA = G B^T
                    for i2 in 0..m {
                        for j in 0..n {
                            let g = grad[i2 * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                ga[i2 * k + l] += g * bv[l * n + j];
                            }
                        }
                    }
                }
                let gb = &mut self.nodes[b].grad;
                // dB = A^T G
                for i2 in 0..m {
                    for l in 0..k {
                        let a_il = av[i2 * k + l];
                        if a_il == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[l * n + j] += a_il * grad[i2 * n + j];
                        }
                    }
                }
            }
            &Op::Transpose(a) => {
                let (ar, ac) = (self.nodes[a].rows, self.nodes[a].cols);
                let ga = &mut self.nodes[a].grad;
                for i2 in 0..rows {
                    for j in 0..cols {
                        ga[j * ac + i2] += grad[i2 * cols + j];
                        debug_assert!(j < ar);
                    }
                }
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p].value.len();
                    let gp = &mut self.nodes[p].grad;
                    for idx in 0..len {
                        gp[idx] += grad[offset + idx];
                    }
                    offset += len;
                }
            }
            &Op::RowSlice { src, start } => {
                let ga = &mut self.nodes[src].grad;
                for idx in 0..grad.len() {
                    ga[start * cols + idx] += grad[idx];
                }
            }
            Op::Gather { table, indices } => {
                let (table, indices) = (*table, indices.clone());
                let gt = &mut self.nodes[table].grad;
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..cols {
                        gt[idx as usize * cols + j] += grad[r * cols + j];
                    }
                }
            }
            &Op::SoftmaxRows(a) => {
                let y = self.nodes[i].value.clone();
                let ga = &mut self.nodes[a].grad;
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &grad[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        ga[r * cols + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            &Op::Sigmoid(a) => {
                let y = self.nodes[i].value.clone();
                let ga = &mut self.nodes[a].grad;
                for idx in 0..grad.len() {
                    ga[idx] += grad[idx] * y[idx] * (1.0 - y[idx]);
                }
            }
            &Op::Log(a) => {
                let x = self.nodes[a].value.clone();
                let ga = &mut self.nodes[a].grad;
                for idx in 0..grad.len() {
                    ga[idx] += grad[idx] / x[idx];
                }
            }
            &Op::LayerNorm(a) => {
                let x = self.nodes[a].value.clone();
                let ga = &mut self.nodes[a].grad;
                for r in 0..rows {
                    let xr = &x[r * cols..(r + 1) * cols];
                    let gr = &grad[r * cols..(r + 1) * cols];
                    let d = cols as f64;
                    let mean = xr.iter().sum::<f64>() / d;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    let g_mean = gr.iter().sum::<f64>() / d;
                    let gx_mean = gr.iter().zip(&xhat).map(|(g, h)| g * h).sum::<f64>() / d;
                    for j in 0..cols {
                        ga[r * cols + j] += inv * (gr[j] - g_mean - xhat[j] * gx_mean);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, ignore } => {
                let (logits, targets, ignore) = (*logits, targets.clone(), *ignore);
                let g0 = grad[0];
                let lcols = self.nodes[logits].cols;
                let lv = self.nodes[logits].value.clone();
                let count = targets.iter().filter(|&&t| Some(t) != ignore).count() as f64;
                let gl = &mut self.nodes[logits].grad;
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) == ignore {
                        continue;
                    }
                    let row = &lv[r * lcols..(r + 1) * lcols];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for j in 0..lcols {
                        let p = (row[j] - max).exp() / denom;
                        let onehot = if j == t as usize { 1.0 } else { 0.0 };
                        gl[r * lcols + j] += g0 * (p - onehot) / count;
                    }
                }
            }
            &Op::ScalarMul { src, c } => {
                self.accumulate(src, &grad, c);
            }
            &Op::Sum(a) => {
                let g0 = grad[0];
                let ga = &mut self.nodes[a].grad;
                ga.iter_mut().for_each(|g| *g += g0);
            }
            &Op::Mean(a) => {
                let n = self.nodes[a].value.len() as f64;
                let g0 = grad[0] / n;
                let ga = &mut self.nodes[a].grad;
                ga.iter_mut().for_each(|g| *g += g0);
            }
            &Op::StraightThrough { src } => {
                self.accumulate(src, &grad, 1.0);
            }
        }
        self.nodes[i].grad = grad;
    }

    fn accumulate(&mut self, target: usize, grad: &[f64], scale: f64) {
        let gt = &mut self.nodes[target].grad;
        for (g, &incoming) in gt.iter_mut().zip(grad) {
            *g += scale * incoming;
        }
    }

    // Reduces `grad` (rows x cols) onto a possibly-broadcast target.
    fn accumulate_reduced(&mut self, target: usize, grad: &[f64], rows: usize, cols: usize, scale: f64) {
        let ts = (self.nodes[target].rows, self.nodes[target].cols);
        let gt = &mut self.nodes[target].grad;
        if ts == (rows, cols) {
            for (g, &incoming) in gt.iter_mut().zip(grad) {
                *g += scale * incoming;
            }
        } else if ts == (1, cols) {
            for r in 0..rows {
                for c in 0..cols {
                    gt[c] += scale * grad[r * cols + c];
                }
            }
        } else {
            gt[0] += scale * grad.iter().sum::<f64>();
        }
    }

    /// Adds this tape's parameter-leaf gradients for `store` into `grads`.
    pub fn accumulate_grads(&self, store: &ParamStore, grads: &mut Grads) {
        assert_eq!(grads.store_name, store.name, "grads built for another store");
        for (name, id, node) in &self.bindings {
            if name == &store.name {
                let src = &self.nodes[*node].grad;
                let dst = &mut grads.data[id.0];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
