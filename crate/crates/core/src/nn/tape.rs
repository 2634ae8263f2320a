//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Each builder method validates shapes eagerly (panicking on mismatch),
//! runs the forward computation immediately, and records what backward needs.
//! The op set is exactly what the trace encoders, reranker, and losses use;
//! sequence ops like the LSTM are fused, with hand-derived backward passes
//! covered by finite-difference tests.

use std::collections::{BTreeMap, HashMap};

use super::{Element, Parameter, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct LstmCache<T> {
    /// Post-activation gates per step, row layout [i | f | g | o], n x 4H.
    gates: Vec<T>,
    /// Cell states per step, n x H.
    cell: Vec<T>,
    /// tanh(cell) per step, n x H.
    tanh_c: Vec<T>,
}

enum Op<T: Element> {
    Leaf { param: Option<String> },
    Gather { table: Var, indices: Vec<u32> },
    LstmSeq { input: Var, w_x: Var, w_h: Var, bias: Var, hidden: usize, cache: LstmCache<T> },
    ReverseRows { input: Var },
    JoinBidir { fwd: Var, bwd: Var },
    RowMean { input: Var },
    RowMax { input: Var, argmax: Vec<usize> },
    RowAt { input: Var, row: usize },
    ConcatVecs { parts: Vec<Var> },
    StackRows { parts: Vec<Var> },
    AddToRows { matrix: Var, vector: Var, rows: Vec<usize> },
    Linear { input: Var, weight: Var, bias: Var },
    Relu { input: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    RowL2Normalize { input: Var, norms: Vec<T> },
    MatMulT { a: Var, b: Var },
    InfoNce { sims: Var, temperature: T, literal: bool },
    BcePair { pos: Var, neg: Var },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients keyed by parameter name, produced by [`Tape::backward`].
pub struct Gradients<T: Element> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    /// Adds these gradients into the parameters' accumulators. Parameters
    /// not touched by the recorded graph are left unchanged.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter<T>>) {
        for p in params {
            if let Some(g) = self.grads.get(&p.name) {
                p.grad.add_assign(g);
            }
        }
    }
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<String, Var>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape { nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        value.debug_check_finite("tape op output");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Records a parameter; repeated registration of the same name returns
    /// the original node so gradients merge.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        if let Some(&v) = self.param_vars.get(&p.name) {
            return v;
        }
        let v = self.push(p.value.clone(), Op::Leaf { param: Some(p.name.clone()) });
        self.param_vars.insert(p.name.clone(), v);
        v
    }

    /// Looks up rows of an embedding table: output row i = table[indices[i]].
    pub fn gather(&mut self, table: Var, indices: &[u32]) -> Var {
        let t = self.value(table);
        assert_eq!(t.rank(), 2, "gather table must be rank 2, got {:?}", t.shape());
        assert!(!indices.is_empty(), "gather needs at least one index");
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &idx in indices {
            let idx = idx as usize;
            assert!(idx < rows, "gather index {idx} out of range for table with {rows} rows");
            data.extend_from_slice(t.row(idx));
        }
        let value = Tensor::from_vec(&[indices.len(), cols], data);
        self.push(value, Op::Gather { table, indices: indices.to_vec() })
    }

    /// One LSTM direction over a sequence. `input` is [n x D]; weights are
    /// [4H x D] and [4H x H] with gate row blocks ordered [i | f | g | o];
    /// bias is [4H]. Returns the hidden states [n x H].
    pub fn lstm_seq(&mut self, input: Var, w_x: Var, w_h: Var, bias: Var) -> Var {
        let x = self.value(input);
        let wx = self.value(w_x);
        let wh = self.value(w_h);
        let b = self.value(bias);
        assert_eq!(x.rank(), 2, "lstm input must be rank 2, got {:?}", x.shape());
        assert_eq!(wx.rank(), 2, "lstm w_x must be rank 2");
        assert!(wx.rows() % 4 == 0, "lstm w_x rows must be 4*hidden, got {}", wx.rows());
        let h = wx.rows() / 4;
        let d = x.cols();
        assert_eq!(wx.cols(), d, "lstm w_x cols {} != input dim {d}", wx.cols());
        assert_eq!(wh.shape(), &[4 * h, h], "lstm w_h shape {:?} != [4H x H]", wh.shape());
        assert_eq!(b.shape(), &[4 * h], "lstm bias shape {:?} != [4H]", b.shape());
        let n = x.rows();
        assert!(n > 0, "lstm over empty sequence");

        let mut hs = vec![T::zero(); n * h];
        let mut gates = vec![T::zero(); n * 4 * h];
        let mut cell = vec![T::zero(); n * h];
        let mut tanh_c = vec![T::zero(); n * h];
        let mut h_prev = vec![T::zero(); h];
        let mut c_prev = vec![T::zero(); h];
        let mut z = vec![T::zero(); 4 * h];

        for t in 0..n {
            let xt = x.row(t);
            for r in 0..4 * h {
                let mut acc = b.data()[r];
                for (w, xv) in wx.row(r).iter().zip(xt) {
                    acc += *w * *xv;
                }
                for (w, hv) in wh.row(r).iter().zip(&h_prev) {
                    acc += *w * *hv;
                }
                z[r] = acc;
            }
            for j in 0..h {
                let i_g = sigmoid(z[j]);
                let f_g = sigmoid(z[h + j]);
                let g_g = z[2 * h + j].tanh();
                let o_g = sigmoid(z[3 * h + j]);
                let c = f_g * c_prev[j] + i_g * g_g;
                let tc = c.tanh();
                let hv = o_g * tc;
                gates[t * 4 * h + j] = i_g;
                gates[t * 4 * h + h + j] = f_g;
                gates[t * 4 * h + 2 * h + j] = g_g;
                gates[t * 4 * h + 3 * h + j] = o_g;
                cell[t * h + j] = c;
                tanh_c[t * h + j] = tc;
                hs[t * h + j] = hv;
                c_prev[j] = c;
                h_prev[j] = hv;
            }
        }

        let value = Tensor::from_vec(&[n, h], hs);
        let cache = LstmCache { gates, cell, tanh_c };
        self.push(value, Op::LstmSeq { input, w_x, w_h, bias, hidden: h, cache })
    }

    /// Reverses the row order of a rank-2 tensor.
    pub fn reverse_rows(&mut self, input: Var) -> Var {
        let x = self.value(input);
        assert_eq!(x.rank(), 2, "reverse_rows needs rank 2, got {:?}", x.shape());
        let (n, c) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(n * c);
        for r in (0..n).rev() {
            data.extend_from_slice(x.row(r));
        }
        let value = Tensor::from_vec(&[n, c], data);
        self.push(value, Op::ReverseRows { input })
    }

    /// Joins per-direction LSTM states into per-position outputs. `fwd` holds
    /// states in input order; `bwd` holds states of the reversed sequence, so
    /// its row j describes original position n-1-j. Output row i is
    /// [fwd[i] | bwd[n-1-i]].
    pub fn join_bidir(&mut self, fwd: Var, bwd: Var) -> Var {
        let f = self.value(fwd);
        let b = self.value(bwd);
        assert_eq!(f.shape(), b.shape(), "join_bidir shape mismatch {:?} vs {:?}", f.shape(), b.shape());
        assert_eq!(f.rank(), 2, "join_bidir needs rank 2");
        let (n, h) = (f.rows(), f.cols());
        let mut data = Vec::with_capacity(n * 2 * h);
        for i in 0..n {
            data.extend_from_slice(f.row(i));
            data.extend_from_slice(b.row(n - 1 - i));
        }
        let value = Tensor::from_vec(&[n, 2 * h], data);
        self.push(value, Op::JoinBidir { fwd, bwd })
    }

    /// Column-wise mean over rows: [n x d] -> [d].
    pub fn row_mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        assert_eq!(x.rank(), 2, "row_mean needs rank 2, got {:?}", x.shape());
        let (n, d) = (x.rows(), x.cols());
        assert!(n > 0);
        let inv = T::from_f64(1.0 / n as f64);
        let mut out = vec![T::zero(); d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += *v;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        self.push(Tensor::vector(out), Op::RowMean { input })
    }

    /// Column-wise max over rows: [n x d] -> [d]. First maximal row wins ties.
    pub fn row_max(&mut self, input: Var) -> Var {
        let x = self.value(input);
        assert_eq!(x.rank(), 2, "row_max needs rank 2, got {:?}", x.shape());
        let (n, d) = (x.rows(), x.cols());
        assert!(n > 0);
        let mut out: Vec<T> = x.row(0).to_vec();
        let mut argmax = vec![0usize; d];
        for r in 1..n {
            for (j, v) in x.row(r).iter().enumerate() {
                if *v > out[j] {
                    out[j] = *v;
                    argmax[j] = r;
                }
            }
        }
        self.push(Tensor::vector(out), Op::RowMax { input, argmax })
    }

    /// Extracts one row of a rank-2 tensor as a vector.
    pub fn row_at(&mut self, input: Var, row: usize) -> Var {
        let x = self.value(input);
        assert_eq!(x.rank(), 2, "row_at needs rank 2, got {:?}", x.shape());
        assert!(row < x.rows(), "row_at {row} out of range ({} rows)", x.rows());
        let value = Tensor::vector(x.row(row).to_vec());
        self.push(value, Op::RowAt { input, row })
    }

    /// Concatenates vectors into one vector.
    pub fn concat_vecs(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_vecs needs at least one part");
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rank(), 1, "concat_vecs needs rank-1 parts, got {:?}", v.shape());
            data.extend_from_slice(v.data());
        }
        self.push(Tensor::vector(data), Op::ConcatVecs { parts: parts.to_vec() })
    }

    /// Stacks equal-length vectors into a [n x d] matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows needs at least one part");
        let d = self.value(parts[0]).len();
        let mut data = Vec::with_capacity(parts.len() * d);
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rank(), 1, "stack_rows needs rank-1 parts, got {:?}", v.shape());
            assert_eq!(v.len(), d, "stack_rows length mismatch: {} vs {d}", v.len());
            data.extend_from_slice(v.data());
        }
        let value = Tensor::from_vec(&[parts.len(), d], data);
        self.push(value, Op::StackRows { parts: parts.to_vec() })
    }

    /// Adds `vector` to the listed rows of `matrix`.
    pub fn add_to_rows(&mut self, matrix: Var, vector: Var, rows: &[usize]) -> Var {
        let m = self.value(matrix);
        let v = self.value(vector);
        assert_eq!(m.rank(), 2, "add_to_rows matrix must be rank 2");
        assert_eq!(v.rank(), 1, "add_to_rows vector must be rank 1");
        assert_eq!(m.cols(), v.len(), "add_to_rows width mismatch: {} vs {}", m.cols(), v.len());
        let mut out = m.clone();
        for &r in rows {
            assert!(r < out.rows(), "add_to_rows row {r} out of range");
            for (o, &add) in out.row_mut(r).iter_mut().zip(v.data()) {
                *o += add;
            }
        }
        self.push(out, Op::AddToRows { matrix, vector, rows: rows.to_vec() })
    }

    /// Affine map of a vector: weight [m x d] * input [d] + bias [m].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        assert_eq!(x.rank(), 1, "linear input must be rank 1, got {:?}", x.shape());
        assert_eq!(w.rank(), 2, "linear weight must be rank 2");
        assert_eq!(w.cols(), x.len(), "linear dim mismatch: weight cols {} vs input {}", w.cols(), x.len());
        assert_eq!(b.shape(), &[w.rows()], "linear bias shape {:?} vs [{}]", b.shape(), w.rows());
        let mut out = b.data().to_vec();
        for (r, o) in out.iter_mut().enumerate() {
            for (wv, xv) in w.row(r).iter().zip(x.data()) {
                *o += *wv * *xv;
            }
        }
        self.push(Tensor::vector(out), Op::Linear { input, weight, bias })
    }

    /// Elementwise max(0, x).
    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::from_vec(x.shape(), data);
        self.push(value, Op::Relu { input })
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::from_vec(x.shape(), data);
        self.push(value, Op::Scale { input, factor })
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let mut acc = T::zero();
        for &v in x.data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::Sum { input })
    }

    /// Normalizes each row to unit L2 norm. Zero rows are a degenerate-model
    /// condition and panic.
    pub fn row_l2_normalize(&mut self, input: Var) -> Var {
        let x = self.value(input);
        assert_eq!(x.rank(), 2, "row_l2_normalize needs rank 2, got {:?}", x.shape());
        let (n, d) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(n * d);
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let mut sq = T::zero();
            for &v in row {
                sq += v * v;
            }
            let norm = sq.sqrt();
            assert!(norm > T::zero(), "row_l2_normalize: row {r} has zero norm");
            for &v in row {
                data.push(v / norm);
            }
            norms.push(norm);
        }
        let value = Tensor::from_vec(&[n, d], data);
        self.push(value, Op::RowL2Normalize { input, norms })
    }

    /// a [n x d] times b-transposed [m x d] -> [n x m].
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.rank(), 2, "matmul_t a must be rank 2");
        assert_eq!(bv.rank(), 2, "matmul_t b must be rank 2");
        assert_eq!(av.cols(), bv.cols(), "matmul_t inner dim mismatch: {} vs {}", av.cols(), bv.cols());
        let (n, m) = (av.rows(), bv.rows());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let ar = av.row(i);
            for j in 0..m {
                let mut acc = T::zero();
                for (x, y) in ar.iter().zip(bv.row(j)) {
                    acc += *x * *y;
                }
                data.push(acc);
            }
        }
        let value = Tensor::from_vec(&[n, m], data);
        self.push(value, Op::MatMulT { a, b })
    }

    /// Contrastive loss over a similarity matrix whose diagonal holds the
    /// anchor-positive scores. Standard form divides by the full row of
    /// exponentials; the literal form divides by the off-diagonal entries
    /// only. Returns the mean over anchors.
    pub fn info_nce(&mut self, sims: Var, temperature: T, literal: bool) -> Var {
        let s = self.value(sims);
        assert_eq!(s.rank(), 2, "info_nce needs rank 2, got {:?}", s.shape());
        let n = s.rows();
        assert_eq!(s.cols(), n, "info_nce needs a square matrix, got {:?}", s.shape());
        assert!(n >= 2, "info_nce needs batch size >= 2, got {n}");
        assert!(temperature > T::zero(), "info_nce temperature must be positive");
        let mut total = T::zero();
        for i in 0..n {
            let row = s.row(i);
            let mut m = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if literal && j == i {
                    continue;
                }
                let l = v / temperature;
                if l > m {
                    m = l;
                }
            }
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if literal && j == i {
                    continue;
                }
                denom += ((v / temperature) - m).exp();
            }
            let lse = m + denom.ln();
            total += lse - row[i] / temperature;
        }
        let value = Tensor::scalar(total / T::from_f64(n as f64));
        self.push(value, Op::InfoNce { sims, temperature, literal })
    }

    /// Pairwise binary cross-entropy on logits:
    /// softplus(-pos) + softplus(neg), both inputs scalar.
    pub fn bce_pair(&mut self, pos: Var, neg: Var) -> Var {
        let p = self.value(pos);
        let n = self.value(neg);
        assert!(p.is_scalar(), "bce_pair pos must be scalar, got {:?}", p.shape());
        assert!(n.is_scalar(), "bce_pair neg must be scalar, got {:?}", n.shape());
        let loss = softplus(-p.item()) + softplus(n.item());
        self.push(Tensor::scalar(loss), Op::BcePair { pos, neg })
    }

    /// Reverse pass from a scalar loss. Returns gradients keyed by parameter
    /// name; a graph not touching any parameter yields an empty map.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let loss_t = self.value(loss);
        assert!(loss_t.is_scalar(), "backward needs a scalar loss, got {:?}", loss_t.shape());

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(loss_t.shape(), vec![T::one()]));
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(name) = param {
                        add_into_map(&mut out, name, grad);
                    }
                }
                Op::Gather { table, indices } => {
                    let t = self.value(*table);
                    let cols = t.cols();
                    let mut g = Tensor::zeros(t.shape());
                    for (i, &idx) in indices.iter().enumerate() {
                        let dst = g.row_mut(idx as usize);
                        let src = &grad.data()[i * cols..(i + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                    accumulate(&mut grads, *table, g);
                }
                Op::LstmSeq { input, w_x, w_h, bias, hidden, cache } => {
                    let (gi, gwx, gwh, gb) = self.lstm_backward(
                        &grad,
                        &node.value,
                        *input,
                        *w_x,
                        *w_h,
                        *hidden,
                        cache,
                    );
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *w_x, gwx);
                    accumulate(&mut grads, *w_h, gwh);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::ReverseRows { input } => {
                    let (n, c) = (node.value.rows(), node.value.cols());
                    let mut g = Tensor::zeros(&[n, c]);
                    for r in 0..n {
                        let src = &grad.data()[r * c..(r + 1) * c];
                        let dst = g.row_mut(n - 1 - r);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                    accumulate(&mut grads, *input, g);
                }
                Op::JoinBidir { fwd, bwd } => {
                    let n = node.value.rows();
                    let h = node.value.cols() / 2;
                    let mut gf = Tensor::zeros(&[n, h]);
                    let mut gb = Tensor::zeros(&[n, h]);
                    for i in 0..n {
                        let row = grad.row(i);
                        for (d, s) in gf.row_mut(i).iter_mut().zip(&row[..h]) {
                            *d += *s;
                        }
                        for (d, s) in gb.row_mut(n - 1 - i).iter_mut().zip(&row[h..]) {
                            *d += *s;
                        }
                    }
                    accumulate(&mut grads, *fwd, gf);
                    accumulate(&mut grads, *bwd, gb);
                }
                Op::RowMean { input } => {
                    let x = self.value(*input);
                    let (n, d) = (x.rows(), x.cols());
                    let inv = T::from_f64(1.0 / n as f64);
                    let mut g = Tensor::zeros(&[n, d]);
                    for r in 0..n {
                        for (dst, s) in g.row_mut(r).iter_mut().zip(grad.data()) {
                            *dst += *s * inv;
                        }
                    }
                    accumulate(&mut grads, *input, g);
                }
                Op::RowMax { input, argmax } => {
                    let x = self.value(*input);
                    let mut g = Tensor::zeros(x.shape());
                    let d = x.cols();
                    for (j, (&r, &gv)) in argmax.iter().zip(grad.data()).enumerate() {
                        g.data_mut()[r * d + j] += gv;
                    }
                    accumulate(&mut grads, *input, g);
                }
                Op::RowAt { input, row } => {
                    let x = self.value(*input);
                    let mut g = Tensor::zeros(x.shape());
                    for (d, s) in g.row_mut(*row).iter_mut().zip(grad.data()) {
                        *d += *s;
                    }
                    accumulate(&mut grads, *input, g);
                }
                Op::ConcatVecs { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let g = Tensor::vector(grad.data()[offset..offset + len].to_vec());
                        accumulate(&mut grads, p, g);
                        offset += len;
                    }
                }
                Op::StackRows { parts } => {
                    let d = node.value.cols();
                    for (i, &p) in parts.iter().enumerate() {
                        let g = Tensor::vector(grad.data()[i * d..(i + 1) * d].to_vec());
                        accumulate(&mut grads, p, g);
                    }
                }
                Op::AddToRows { matrix, vector, rows } => {
                    let d = node.value.cols();
                    let mut gv = Tensor::zeros(&[d]);
                    for &r in rows {
                        for (dst, s) in gv.data_mut().iter_mut().zip(grad.row(r)) {
                            *dst += *s;
                        }
                    }
                    accumulate(&mut grads, *vector, gv);
                    accumulate(&mut grads, *matrix, grad);
                }
                Op::Linear { input, weight, bias } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (m, d) = (w.rows(), w.cols());
                    let mut gw = Tensor::zeros(&[m, d]);
                    let mut gx = Tensor::zeros(&[d]);
                    for r in 0..m {
                        let gr = grad.data()[r];
                        for (k, (dst, xv)) in gw.row_mut(r).iter_mut().zip(x.data()).enumerate() {
                            *dst += gr * *xv;
                            gx.data_mut()[k] += gr * w.row(r)[k];
                        }
                    }
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *bias, grad);
                    accumulate(&mut grads, *input, gx);
                }
                Op::Relu { input } => {
                    let x = self.value(*input);
                    let data = x
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *input, Tensor::from_vec(x.shape(), data));
                }
                Op::Scale { input, factor } => {
                    let data = grad.data().iter().map(|&g| g * *factor).collect();
                    accumulate(&mut grads, *input, Tensor::from_vec(grad.shape(), data));
                }
                Op::Sum { input } => {
                    let x = self.value(*input);
                    let gv = grad.item();
                    let data = vec![gv; x.len()];
                    accumulate(&mut grads, *input, Tensor::from_vec(x.shape(), data));
                }
                Op::RowL2Normalize { input, norms } => {
                    let y = &node.value;
                    let (n, d) = (y.rows(), y.cols());
                    let mut g = Tensor::zeros(&[n, d]);
                    for r in 0..n {
                        let yr = y.row(r);
                        let gr = grad.row(r);
                        let mut dot = T::zero();
                        for (&gv, &yv) in gr.iter().zip(yr) {
                            dot += gv * yv;
                        }
                        for (k, dst) in g.row_mut(r).iter_mut().enumerate() {
                            *dst += (gr[k] - yr[k] * dot) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *input, g);
                }
                Op::MatMulT { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (n, m, d) = (av.rows(), bv.rows(), av.cols());
                    let mut ga = Tensor::zeros(&[n, d]);
                    let mut gb = Tensor::zeros(&[m, d]);
                    for i in 0..n {
                        let gr = grad.row(i);
                        for j in 0..m {
                            let gv = gr[j];
                            if gv == T::zero() {
                                continue;
                            }
                            for k in 0..d {
                                ga.data_mut()[i * d + k] += gv * bv.row(j)[k];
                                gb.data_mut()[j * d + k] += gv * av.row(i)[k];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::InfoNce { sims, temperature, literal } => {
                    let s = self.value(*sims);
                    let n = s.rows();
                    let gout = grad.item();
                    let scale = gout / (T::from_f64(n as f64) * *temperature);
                    let mut g = Tensor::zeros(s.shape());
                    for i in 0..n {
                        let row = s.row(i);
                        let mut m = T::neg_infinity();
                        for (j, &v) in row.iter().enumerate() {
                            if *literal && j == i {
                                continue;
                            }
                            let l = v / *temperature;
                            if l > m {
                                m = l;
                            }
                        }
                        let mut denom = T::zero();
                        for (j, &v) in row.iter().enumerate() {
                            if *literal && j == i {
                                continue;
                            }
                            denom += ((v / *temperature) - m).exp();
                        }
                        for j in 0..n {
                            let dst = &mut g.data_mut()[i * n + j];
                            if *literal {
                                if j == i {
                                    *dst += -scale;
                                } else {
                                    let p = ((row[j] / *temperature) - m).exp() / denom;
                                    *dst += scale * p;
                                }
                            } else {
                                let p = ((row[j] / *temperature) - m).exp() / denom;
                                let delta = if j == i { T::one() } else { T::zero() };
                                *dst += scale * (p - delta);
                            }
                        }
                    }
                    accumulate(&mut grads, *sims, g);
                }
                Op::BcePair { pos, neg } => {
                    let gout = grad.item();
                    let p = self.value(*pos).item();
                    let n = self.value(*neg).item();
                    let gp = -sigmoid(-p) * gout;
                    let gn = sigmoid(n) * gout;
                    accumulate(&mut grads, *pos, Tensor::from_vec(self.value(*pos).shape(), vec![gp]));
                    accumulate(&mut grads, *neg, Tensor::from_vec(self.value(*neg).shape(), vec![gn]));
                }
            }
        }
        Gradients { grads: out }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        grad_out: &Tensor<T>,
        hs: &Tensor<T>,
        input: Var,
        w_x: Var,
        w_h: Var,
        hidden: usize,
        cache: &LstmCache<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
        let x = self.value(input);
        let wx = self.value(w_x);
        let wh = self.value(w_h);
        let (n, d) = (x.rows(), x.cols());
        let h = hidden;
        let one = T::one();

        let mut gi = Tensor::zeros(&[n, d]);
        let mut gwx = Tensor::zeros(&[4 * h, d]);
        let mut gwh = Tensor::zeros(&[4 * h, h]);
        let mut gb = Tensor::zeros(&[4 * h]);

        let mut dh_rec = vec![T::zero(); h];
        let mut dc = vec![T::zero(); h];
        let mut dz = vec![T::zero(); 4 * h];
        let zeros = vec![T::zero(); h];

        for t in (0..n).rev() {
            for j in 0..h {
                let dh = grad_out.row(t)[j] + dh_rec[j];
                let i_g = cache.gates[t * 4 * h + j];
                let f_g = cache.gates[t * 4 * h + h + j];
                let g_g = cache.gates[t * 4 * h + 2 * h + j];
                let o_g = cache.gates[t * 4 * h + 3 * h + j];
                let tc = cache.tanh_c[t * h + j];
                let c_prev = if t > 0 { cache.cell[(t - 1) * h + j] } else { T::zero() };

                let dcj = dc[j] + dh * o_g * (one - tc * tc);
                dz[3 * h + j] = dh * tc * o_g * (one - o_g);
                dz[j] = dcj * g_g * i_g * (one - i_g);
                dz[2 * h + j] = dcj * i_g * (one - g_g * g_g);
                dz[h + j] = dcj * c_prev * f_g * (one - f_g);
                dc[j] = dcj * f_g;
            }

            let xt = x.row(t);
            let hprev: &[T] = if t > 0 { hs.row(t - 1) } else { &zeros };
            for r in 0..4 * h {
                let dzr = dz[r];
                gb.data_mut()[r] += dzr;
                for (dst, xv) in gwx.row_mut(r).iter_mut().zip(xt) {
                    *dst += dzr * *xv;
                }
                for (dst, hv) in gwh.row_mut(r).iter_mut().zip(hprev) {
                    *dst += dzr * *hv;
                }
            }
            for k in 0..d {
                let mut acc = T::zero();
                for r in 0..4 * h {
                    acc += wx.row(r)[k] * dz[r];
                }
                gi.row_mut(t)[k] = acc;
            }
            for (k, dst) in dh_rec.iter_mut().enumerate() {
                let mut acc = T::zero();
                for r in 0..4 * h {
                    acc += wh.row(r)[k] * dz[r];
                }
                *dst = acc;
            }
        }
        (gi, gwx, gwh, gb)
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn add_into_map<T: Element>(map: &mut BTreeMap<String, Tensor<T>>, name: &str, g: Tensor<T>) {
    match map.get_mut(name) {
        Some(existing) => existing.add_assign(&g),
        None => {
            map.insert(name.to_string(), g);
        }
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Numerically stable ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|).
fn softplus<T: Element>(x: T) -> T {
    let m = if x > T::zero() { x } else { T::zero() };
    m + (-x.abs()).exp().ln_1p()
}
