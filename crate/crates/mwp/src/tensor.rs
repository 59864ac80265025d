//! Tape-based reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records a define-by-run graph: every operation appends a node
//! holding its dense row-major value, and [`Tape::backward`] walks the
//! nodes in reverse to accumulate gradients of a scalar root with respect
//! to every node. Parameter tensors enter as leaves sharing their storage
//! (`Arc`), so building a graph never copies weights.
//!
//! The op set is exactly what the solver needs: matrix products (plain and
//! with a transposed right operand), broadcast adds, row-wise masked
//! softmax, L1 row normalisation, layer norm, GELU, sigmoid, log, gather,
//! row/column slicing, concatenation, slot scatter-add, entry picking, and
//! scalar reductions. Shapes are validated with assertions; a shape
//! mismatch is a programming error, not input-dependent.

use std::sync::Arc;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    /// `A @ B^T` where `b` is stored `[n, k]`.
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Broadcast-add a `[1, n]` row to every row of `a`.
    AddRow { a: NodeId, row: NodeId },
    Scale { a: NodeId, c: f64 },
    Offset { a: NodeId },
    Hadamard { a: NodeId, b: NodeId },
    /// Multiply every entry of `a` by the `[1, 1]` node `s`.
    ScalarMul { s: NodeId, a: NodeId },
    MaskedSoftmax { a: NodeId, mask: Arc<Vec<bool>> },
    RowL1Normalize { a: NodeId },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Gelu { a: NodeId },
    Sigmoid { a: NodeId },
    Ln { a: NodeId },
    Gather { table: NodeId, idx: Arc<Vec<u32>> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatRows { parts: Arc<Vec<NodeId>> },
    /// Scatter-add the `[1, n]` row `a` into width `w`: `y[map[j]] += a[j]`.
    MapSlots { a: NodeId, map: Arc<Vec<usize>> },
    PickEntries { a: NodeId, coords: Arc<Vec<(usize, usize)>> },
    SumAll { a: NodeId },
    AddN { parts: Arc<Vec<NodeId>> },
    Dropout { a: NodeId, mask: Arc<Vec<f64>> },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Arc<Vec<f64>>,
}

/// `out[m×n] += A[m×k] @ B[k×n]`, all row-major.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m×n] += A[m×k] @ B^T` with `B` stored `[n, k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert!(a.len() == m * k && b.len() == n * k && out.len() == m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out[k×n] += A^T @ B` with `A` stored `[m, k]`, `B` stored `[m, n]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert!(a.len() == m * k && b.len() == m * n && out.len() == k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

/// Gradients of a scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, value: Arc::new(value) });
        self.nodes.len() - 1
    }

    /// Insert a parameter or constant without copying its storage.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Arc<Vec<f64>>) -> NodeId {
        assert_eq!(value.len(), rows * cols, "leaf shape mismatch");
        self.nodes.push(Node { op: Op::Leaf, rows, cols, value });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        self.leaf(rows, cols, Arc::new(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let mut out = vec![0.0; m * n];
        gemm_nn(m, ka, n, self.data(a), self.data(b), &mut out);
        self.push(Op::MatMul { a, b }, m, n, out)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        assert_eq!(ka, kb, "matmul_nt inner dims {ka} vs {kb}");
        let mut out = vec![0.0; m * n];
        gemm_nt(m, ka, n, self.data(a), self.data(b), &mut out);
        self.push(Op::MatMulNT { a, b }, m, n, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let (m, n) = self.shape(a);
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push(Op::Add { a, b }, m, n, out)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row wants [1,{n}]");
        let r = self.data(row).to_vec();
        let out = self
            .data(a)
            .chunks_exact(n)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        self.push(Op::AddRow { a, row }, m, n, out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.data(a).iter().map(|x| x * c).collect();
        self.push(Op::Scale { a, c }, m, n, out)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.data(a).iter().map(|x| x + c).collect();
        self.push(Op::Offset { a }, m, n, out)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "hadamard shape mismatch");
        let (m, n) = self.shape(a);
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push(Op::Hadamard { a, b }, m, n, out)
    }

    pub fn scalar_mul(&mut self, s: NodeId, a: NodeId) -> NodeId {
        assert_eq!(self.shape(s), (1, 1), "scalar_mul wants a [1,1] scalar");
        let (m, n) = self.shape(a);
        let c = self.data(s)[0];
        let out = self.data(a).iter().map(|x| x * c).collect();
        self.push(Op::ScalarMul { s, a }, m, n, out)
    }

    /// Row-wise softmax over the positions `mask` allows; forbidden
    /// positions produce exact zeros. Every row must allow at least one
    /// position.
    pub fn masked_softmax(&mut self, a: NodeId, mask: Arc<Vec<bool>>) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(mask.len(), m * n, "mask shape mismatch");
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mrow = &mask[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for (v, &ok) in row.iter().zip(mrow) {
                if ok && *v > mx {
                    mx = *v;
                }
            }
            assert!(mx > f64::NEG_INFINITY, "softmax row {i} fully masked");
            let mut z = 0.0;
            for j in 0..n {
                if mrow[j] {
                    let e = (row[j] - mx).exp();
                    out[i * n + j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        self.push(Op::MaskedSoftmax { a, mask }, m, n, out)
    }

    /// Divide each row by its sum. Inputs must be non-negative with a
    /// positive row sum.
    pub fn row_l1_normalize(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let s: f64 = row.iter().sum();
            assert!(s > 0.0, "row_l1_normalize: row {i} sums to {s}");
            for j in 0..n {
                out[i * n + j] = row[j] / s;
            }
        }
        self.push(Op::RowL1Normalize { a }, m, n, out)
    }

    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(gain), (1, n), "layer_norm gain shape");
        assert_eq!(self.shape(bias), (1, n), "layer_norm bias shape");
        let x = self.data(a);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = g[j] * (row[j] - mean) * inv + b[j];
            }
        }
        self.push(Op::LayerNorm { a, gain, bias, eps }, m, n, out)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.data(a).iter().map(|&x| gelu_parts(x).0).collect();
        self.push(Op::Gelu { a }, m, n, out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.data(a).iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        self.push(Op::Sigmoid { a }, m, n, out)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.data(a).iter().map(|&x| x.ln()).collect();
        self.push(Op::Ln { a }, m, n, out)
    }

    pub fn gather(&mut self, table: NodeId, idx: &[u32]) -> NodeId {
        let (v, d) = self.shape(table);
        let t = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            let i = i as usize;
            assert!(i < v, "gather index {i} out of {v}");
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        self.push(Op::Gather { table, idx: Arc::new(idx.to_vec()) }, idx.len(), d, out)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert!(start + len <= m, "slice_rows {start}+{len} out of {m}");
        let out = self.data(a)[start * n..(start + len) * n].to_vec();
        self.push(Op::SliceRows { a, start }, len, n, out)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "slice_cols {start}+{len} out of {n}");
        let x = self.data(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        self.push(Op::SliceCols { a, start, len }, m, len, out)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, pn) = self.shape(p);
            assert_eq!(pn, n, "concat_rows column mismatch");
            rows += m;
            out.extend_from_slice(self.data(p));
        }
        self.push(Op::ConcatRows { parts: Arc::new(parts.to_vec()) }, rows, n, out)
    }

    /// Scatter-add a `[1, n]` row into a `[1, width]` row: `y[map[j]] += x[j]`.
    pub fn map_slots(&mut self, a: NodeId, map: &[usize], width: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(m, 1, "map_slots wants a row vector");
        assert_eq!(map.len(), n, "map length mismatch");
        let mut out = vec![0.0; width];
        for (j, &slot) in map.iter().enumerate() {
            assert!(slot < width, "slot {slot} out of {width}");
            out[slot] += self.data(a)[j];
        }
        self.push(Op::MapSlots { a, map: Arc::new(map.to_vec()) }, 1, width, out)
    }

    /// Gather scalar entries `(row, col)` into a `[1, len]` row.
    pub fn pick_entries(&mut self, a: NodeId, coords: &[(usize, usize)]) -> NodeId {
        let (m, n) = self.shape(a);
        let x = self.data(a);
        let mut out = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            assert!(r < m && c < n, "pick ({r},{c}) out of ({m},{n})");
            out.push(x[r * n + c]);
        }
        self.push(Op::PickEntries { a, coords: Arc::new(coords.to_vec()) }, 1, coords.len(), out)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.data(a).iter().sum();
        self.push(Op::SumAll { a }, 1, 1, vec![s])
    }

    pub fn add_n(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "add_n of nothing");
        let (m, n) = self.shape(parts[0]);
        let mut out = vec![0.0; m * n];
        for &p in parts {
            assert_eq!(self.shape(p), (m, n), "add_n shape mismatch");
            for (o, v) in out.iter_mut().zip(self.data(p)) {
                *o += v;
            }
        }
        self.push(Op::AddN { parts: Arc::new(parts.to_vec()) }, m, n, out)
    }

    /// Inverted dropout with keep-probability `1 - p`; `mask` entries are
    /// `0` or `1/(1-p)`. Identity when `p == 0` is the caller's shortcut.
    pub fn dropout(&mut self, a: NodeId, mask: Arc<Vec<f64>>) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(mask.len(), m * n, "dropout mask shape");
        let out = self.data(a).iter().zip(mask.iter()).map(|(x, k)| x * k).collect();
        self.push(Op::Dropout { a, mask }, m, n, out)
    }

    /// Reverse-mode sweep from a `[1, 1]` root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(dy) = grads[id].take() else { continue };
            self.backprop_node(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Gradients { grads }
    }

    fn grad_buf<'g>(
        &self,
        grads: &'g mut Vec<Option<Vec<f64>>>,
        id: NodeId,
    ) -> &'g mut Vec<f64> {
        let len = self.nodes[id].rows * self.nodes[id].cols;
        grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop_node(&self, id: NodeId, dy: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[id];
        let (m, n) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let k = self.nodes[*a].cols;
                gemm_nt(m, n, k, dy, self.data(*b), self.grad_buf(grads, *a));
                gemm_tn(m, k, n, self.data(*a), dy, self.grad_buf(grads, *b));
            }
            Op::MatMulNT { a, b } => {
                let k = self.nodes[*a].cols;
                gemm_nn(m, n, k, dy, self.data(*b), self.grad_buf(grads, *a));
                gemm_tn(m, n, k, dy, self.data(*a), self.grad_buf(grads, *b));
            }
            Op::Add { a, b } => {
                for (g, d) in self.grad_buf(grads, *a).iter_mut().zip(dy) {
                    *g += d;
                }
                for (g, d) in self.grad_buf(grads, *b).iter_mut().zip(dy) {
                    *g += d;
                }
            }
            Op::AddRow { a, row } => {
                for (g, d) in self.grad_buf(grads, *a).iter_mut().zip(dy) {
                    *g += d;
                }
                let gr = self.grad_buf(grads, *row);
                for chunk in dy.chunks_exact(n) {
                    for (g, d) in gr.iter_mut().zip(chunk) {
                        *g += d;
                    }
                }
            }
            Op::Scale { a, c } => {
                for (g, d) in self.grad_buf(grads, *a).iter_mut().zip(dy) {
                    *g += c * d;
                }
            }
            Op::Offset { a } => {
                for (g, d) in self.grad_buf(grads, *a).iter_mut().zip(dy) {
                    *g += d;
                }
            }
            Op::Hadamard { a, b } => {
                for ((g, d), v) in self.grad_buf(grads, *a).iter_mut().zip(dy).zip(self.data(*b)) {
                    *g += d * v;
                }
                for ((g, d), v) in self.grad_buf(grads, *b).iter_mut().zip(dy).zip(self.data(*a)) {
                    *g += d * v;
                }
            }
            Op::ScalarMul { s, a } => {
                let c = self.data(*s)[0];
                for (g, d) in self.grad_buf(grads, *a).iter_mut().zip(dy) {
                    *g += c * d;
                }
                let acc: f64 = dy.iter().zip(self.data(*a)).map(|(d, v)| d * v).sum();
                self.grad_buf(grads, *s)[0] += acc;
            }
            Op::MaskedSoftmax { a, mask } => {
                let y = self.data(id);
                let ga = self.grad_buf(grads, *a);
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let dyr = &dy[i * n..(i + 1) * n];
                    let mr = &mask[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(dyr).map(|(y, d)| y * d).sum();
                    for j in 0..n {
                        if mr[j] {
                            ga[i * n + j] += yr[j] * (dyr[j] - dot);
                        }
                    }
                }
            }
            Op::RowL1Normalize { a } => {
                let x = self.data(*a);
                let y = self.data(id);
                let ga = self.grad_buf(grads, *a);
                for i in 0..m {
                    let s: f64 = x[i * n..(i + 1) * n].iter().sum();
                    let dot: f64 = y[i * n..(i + 1) * n]
                        .iter()
                        .zip(&dy[i * n..(i + 1) * n])
                        .map(|(y, d)| y * d)
                        .sum();
                    for j in 0..n {
                        ga[i * n + j] += (dy[i * n + j] - dot) / s;
                    }
                }
            }
            Op::LayerNorm { a, gain, bias, eps } => {
                let x = self.data(*a);
                let g = self.data(*gain);
                for i in 0..m {
                    let row = &x[i * n..(i + 1) * n];
                    let dyr = &dy[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = dyr.iter().zip(g).map(|(d, gv)| d * gv).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                    {
                        let ga = self.grad_buf(grads, *a);
                        for j in 0..n {
                            ga[i * n + j] +=
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    {
                        let gg = self.grad_buf(grads, *gain);
                        for j in 0..n {
                            gg[j] += dyr[j] * xhat[j];
                        }
                    }
                    {
                        let gb = self.grad_buf(grads, *bias);
                        for j in 0..n {
                            gb[j] += dyr[j];
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                for ((g, d), &xv) in self.grad_buf(grads, *a).iter_mut().zip(dy).zip(self.data(*a)) {
                    *g += d * gelu_parts(xv).1;
                }
            }
            Op::Sigmoid { a } => {
                for ((g, d), &yv) in self.grad_buf(grads, *a).iter_mut().zip(dy).zip(self.data(id)) {
                    *g += d * yv * (1.0 - yv);
                }
            }
            Op::Ln { a } => {
                for ((g, d), &xv) in self.grad_buf(grads, *a).iter_mut().zip(dy).zip(self.data(*a)) {
                    *g += d / xv;
                }
            }
            Op::Gather { table, idx } => {
                let d = n;
                let gt = self.grad_buf(grads, *table);
                for (i, &t) in idx.iter().enumerate() {
                    let t = t as usize;
                    for j in 0..d {
                        gt[t * d + j] += dy[i * d + j];
                    }
                }
            }
            Op::SliceRows { a, start, .. } => {
                let ga = self.grad_buf(grads, *a);
                for (g, d) in ga[start * n..].iter_mut().zip(dy) {
                    *g += d;
                }
            }
            Op::SliceCols { a, start, len } => {
                let an = self.nodes[*a].cols;
                let ga = self.grad_buf(grads, *a);
                for i in 0..m {
                    for j in 0..*len {
                        ga[i * an + start + j] += dy[i * len + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts.iter() {
                    let rows = self.nodes[p].rows;
                    let gp = self.grad_buf(grads, p);
                    for (g, d) in gp.iter_mut().zip(&dy[offset..offset + rows * n]) {
                        *g += d;
                    }
                    offset += rows * n;
                }
            }
            Op::MapSlots { a, map } => {
                let ga = self.grad_buf(grads, *a);
                for (j, &slot) in map.iter().enumerate() {
                    ga[j] += dy[slot];
                }
            }
            Op::PickEntries { a, coords } => {
                let an = self.nodes[*a].cols;
                let ga = self.grad_buf(grads, *a);
                for (p, &(r, c)) in coords.iter().enumerate() {
                    ga[r * an + c] += dy[p];
                }
            }
            Op::SumAll { a } => {
                let d = dy[0];
                for g in self.grad_buf(grads, *a).iter_mut() {
                    *g += d;
                }
            }
            Op::AddN { parts } => {
                for &p in parts.iter() {
                    for (g, d) in self.grad_buf(grads, p).iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::Dropout { a, mask } => {
                for ((g, d), k) in self.grad_buf(grads, *a).iter_mut().zip(dy).zip(mask.iter()) {
                    *g += d * k;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `build` at randomly drawn inputs.
    fn gradcheck(
        shapes: &[(usize, usize)],
        seed: u64,
        tol: f64,
        build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|&(r, c)| (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let eval = |vals: &[Vec<f64>]| -> (Tape, Vec<NodeId>, NodeId) {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = vals
                .iter()
                .zip(shapes)
                .map(|(v, &(r, c))| tape.constant(r, c, v.clone()))
                .collect();
            let root = build(&mut tape, &ids);
            (tape, ids, root)
        };
        let (tape, ids, root) = eval(&inputs);
        assert_eq!(tape.shape(root), (1, 1));
        let grads = tape.backward(root);
        let h = 1e-5;
        for (which, vals) in inputs.iter().enumerate() {
            let g = grads.get(ids[which]).expect("input should receive a gradient");
            for e in 0..vals.len() {
                let mut plus = inputs.clone();
                plus[which][e] += h;
                let mut minus = inputs.clone();
                minus[which][e] -= h;
                let (tp, _, rp) = eval(&plus);
                let (tm, _, rm) = eval(&minus);
                let numeric = (tp.data(rp)[0] - tm.data(rm)[0]) / (2.0 * h);
                let analytic = g[e];
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() / denom < tol,
                    "input {which} entry {e}: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn gradcheck_matmul_chain() {
        gradcheck(&[(3, 4), (4, 2), (3, 2)], 1, 1e-6, |t, ids| {
            let y = t.matmul(ids[0], ids[1]);
            let h = t.hadamard(y, ids[2]);
            t.sum_all(h)
        });
    }

    #[test]
    fn gradcheck_matmul_nt() {
        gradcheck(&[(3, 4), (5, 4)], 2, 1e-6, |t, ids| {
            let y = t.matmul_nt(ids[0], ids[1]);
            let s = t.gelu(y);
            t.sum_all(s)
        });
    }

    #[test]
    fn gradcheck_add_scale_offset_row() {
        gradcheck(&[(2, 3), (2, 3), (1, 3)], 3, 1e-6, |t, ids| {
            let a = t.add(ids[0], ids[1]);
            let b = t.add_row(a, ids[2]);
            let c = t.scale(b, -1.7);
            let d = t.offset(c, 0.3);
            let e = t.hadamard(d, d);
            t.sum_all(e)
        });
    }

    #[test]
    fn gradcheck_scalar_mul() {
        gradcheck(&[(1, 1), (2, 3)], 4, 1e-6, |t, ids| {
            let y = t.scalar_mul(ids[0], ids[1]);
            let s = t.sigmoid(y);
            t.sum_all(s)
        });
    }

    #[test]
    fn gradcheck_masked_softmax() {
        let mask = vec![true, true, false, true, true, false, true, true];
        gradcheck(&[(2, 4), (2, 4)], 5, 1e-5, move |t, ids| {
            let y = t.masked_softmax(ids[0], Arc::new(mask.clone()));
            let h = t.hadamard(y, ids[1]);
            t.sum_all(h)
        });
    }

    #[test]
    fn gradcheck_row_l1_normalize() {
        gradcheck(&[(2, 3), (2, 3)], 6, 1e-5, |t, ids| {
            let pos = t.sigmoid(ids[0]);
            let y = t.row_l1_normalize(pos);
            let h = t.hadamard(y, ids[1]);
            t.sum_all(h)
        });
    }

    #[test]
    fn gradcheck_layer_norm() {
        gradcheck(&[(3, 4), (1, 4), (1, 4), (3, 4)], 7, 1e-5, |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5);
            let h = t.hadamard(y, ids[3]);
            t.sum_all(h)
        });
    }

    #[test]
    fn gradcheck_unary_ops() {
        gradcheck(&[(2, 3)], 8, 1e-6, |t, ids| {
            let a = t.gelu(ids[0]);
            let b = t.sigmoid(a);
            let c = t.ln(b);
            t.sum_all(c)
        });
    }

    #[test]
    fn gradcheck_gather_slice_concat() {
        gradcheck(&[(4, 3), (2, 3)], 9, 1e-6, |t, ids| {
            let g = t.gather(ids[0], &[1, 3, 1]);
            let cat = t.concat_rows(&[g, ids[1]]);
            let rows = t.slice_rows(cat, 1, 3);
            let cols = t.slice_cols(rows, 1, 2);
            let sq = t.hadamard(cols, cols);
            t.sum_all(sq)
        });
    }

    #[test]
    fn gradcheck_map_slots_pick_add_n() {
        gradcheck(&[(1, 4), (2, 3)], 10, 1e-6, |t, ids| {
            let mapped = t.map_slots(ids[0], &[2, 0, 2, 1], 3);
            let picked = t.pick_entries(ids[1], &[(0, 1), (1, 2), (0, 1)]);
            let both = t.add_n(&[mapped, mapped]);
            let merged = t.concat_rows(&[both, picked]);
            let sq = t.hadamard(merged, merged);
            t.sum_all(sq)
        });
    }

    #[test]
    fn dropout_scales_by_kept_mask() {
        let mut t = Tape::new();
        let a = t.constant(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let d = t.dropout(a, Arc::new(vec![2.0, 0.0, 2.0, 0.0]));
        let s = t.sum_all(d);
        assert_eq!(t.data(d), &[2.0, 0.0, 6.0, 0.0]);
        let g = t.backward(s);
        assert_eq!(g.get(a).unwrap(), &[2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_zero_when_masked() {
        let mut t = Tape::new();
        let a = t.constant(2, 3, vec![0.3, -1.0, 2.0, 5.0, 5.0, 5.0]);
        let mask = Arc::new(vec![true, false, true, true, true, true]);
        let y = t.masked_softmax(a, mask);
        let v = t.data(y);
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] + v[4] + v[5] - 1.0).abs() < 1e-12);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn leaves_share_storage() {
        let data = Arc::new(vec![1.0, 2.0, 3.0, 4.0]);
        let mut t = Tape::new();
        let a = t.leaf(2, 2, Arc::clone(&data));
        assert_eq!(Arc::strong_count(&data), 2);
        assert_eq!(t.data(a), data.as_slice());
    }
}
