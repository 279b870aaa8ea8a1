use super::gemm::gemm;
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSumExp {
        x: Var,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        heads: usize,
    },
    MaskedMean {
        x: Var,
        mask: Vec<f64>,
        counts: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SumLastAxis(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<f64>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            MatMul(a, b) | Add(a, b) | AddBias(a, b) | Mul(a, b) => vec![*a, *b],
            BatchMatMul { a, b, .. } => vec![*a, *b],
            Transpose(x) | Scale(x, _) | Relu(x) | SumLastAxis(x) | Sum(x) => vec![*x],
            Softmax { x, .. }
            | LogSumExp { x, .. }
            | SplitHeads { x, .. }
            | MergeHeads { x, .. }
            | MaskedMean { x, .. }
            | NormalizeRows { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Embedding { table, .. } => vec![*table],
            Concat { parts, .. } => parts.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations for one forward pass and replays them in
/// reverse to accumulate gradients into leaf nodes.
///
/// Leaf gradients persist across calls to [`Tape::backward`]; running it
/// twice without [`Tape::zero_grads`] doubles them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            ref other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input. The tensor's values are copied.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    /// Records a non-differentiable input (masks, positional tables, frozen weights).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Constant)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Ids of the nodes `v` was computed from.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Shape(format!("{op}: expected a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), 0.0, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// Batched product over the leading axis: `[g,m,k]·[g,k,n]`, or
    /// `[g,m,k]·[g,n,k]ᵀ` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (g, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([g, m, k], [g2, k2, n]) if !trans_b && g == g2 && k == k2 => (*g, *m, *k, *n),
            ([g, m, k], [g2, n, k2]) if trans_b && g == g2 && k == k2 => (*g, *m, *k, *n),
            _ => return Err(shape_err("batch_matmul", &sa, &sb)),
        };
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; g * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bv[i * k * n..(i + 1) * k * n],
                b_strides,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(vec![g, m, n], out, Op::BatchMatMul { a, b, trans_b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    /// Adds a bias vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.shape(a).last().copied().unwrap_or(1);
        if self.shape(bias) != [cols] {
            return Err(shape_err("add_bias", self.shape(a), self.shape(bias)));
        }
        let bv = self.value(bias);
        let out = self
            .value(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBias(a, bias)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax: axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| v[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (v[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, axis }))
    }

    /// `log Σ exp` over the last axis.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&cols, lead)) = shape.split_last() else {
            return Err(Error::Shape("log_sum_exp: scalar input".into()));
        };
        let v = self.value(x);
        let mut probs = vec![0.0; v.len()];
        let mut out = Vec::with_capacity(v.len() / cols.max(1));
        for (row, p) in v.chunks(cols).zip(probs.chunks_mut(cols)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (pj, &z) in p.iter_mut().zip(row) {
                *pj = (z - max).exp();
                total += *pj;
            }
            p.iter_mut().for_each(|pj| *pj /= total);
            out.push(max + total.ln());
        }
        Ok(self.push(lead.to_vec(), out, Op::LogSumExp { x, probs }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    /// `eps` is added to the variance inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = shape.last().copied().unwrap_or(1);
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(shape_err("layer_norm", &shape, self.shape(gain)));
        }
        let (v, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let rows = v.len() / cols;
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!(
                "embedding: id {bad} out of range for table {:?}",
                self.shape(table)
            )));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat: no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!(
                "concat: axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `[batch*seq, heads*dh]` → `[batch*heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let (rows, width) = self.dims2(x, "split_heads")?;
        if batch == 0 || heads == 0 || rows % batch != 0 || width % heads != 0 {
            return Err(Error::Shape(format!(
                "split_heads: {:?} not divisible into {batch} rows × {heads} heads",
                self.shape(x)
            )));
        }
        let (seq, dh) = (rows / batch, width / heads);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..seq {
                    let src = (b * seq + s) * width + h * dh;
                    let dst = ((b * heads + h) * seq + s) * dh;
                    out[dst..dst + dh].copy_from_slice(&v[src..src + dh]);
                }
            }
        }
        Ok(self.push(
            vec![batch * heads, seq, dh],
            out,
            Op::SplitHeads { x, batch, heads },
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let (g, seq, dh) = match self.shape(x) {
            [g, s, d] if batch * heads == *g => (*g, *s, *d),
            s => {
                return Err(Error::Shape(format!(
                    "merge_heads: {s:?} does not hold {batch}×{heads} groups"
                )))
            }
        };
        let width = heads * dh;
        let v = self.value(x);
        let mut out = vec![0.0; g * seq * dh];
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..seq {
                    let dst = (b * seq + s) * width + h * dh;
                    let src = ((b * heads + h) * seq + s) * dh;
                    out[dst..dst + dh].copy_from_slice(&v[src..src + dh]);
                }
            }
        }
        Ok(self.push(
            vec![batch * seq, width],
            out,
            Op::MergeHeads { x, batch, heads },
        ))
    }

    /// Mean of `[batch*seq, d]` rows over positions whose mask is nonzero,
    /// giving `[batch, d]`. Every sequence needs at least one unmasked position.
    pub fn masked_mean(&mut self, x: Var, mask: &[f64], batch: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x, "masked_mean")?;
        if mask.len() != rows || batch == 0 || rows % batch != 0 {
            return Err(Error::Shape(format!(
                "masked_mean: mask of length {} for {:?} in {batch} sequences",
                mask.len(),
                self.shape(x)
            )));
        }
        let seq = rows / batch;
        let v = self.value(x);
        let mut out = vec![0.0; batch * d];
        let mut counts = vec![0.0; batch];
        for b in 0..batch {
            let c: f64 = mask[b * seq..(b + 1) * seq].iter().sum();
            if c <= 0.0 {
                return Err(Error::Data(format!(
                    "masked_mean: sequence {b} has no unmasked positions"
                )));
            }
            counts[b] = c;
            let acc = &mut out[b * d..(b + 1) * d];
            for s in 0..seq {
                let w = mask[b * seq + s];
                if w != 0.0 {
                    let r = b * seq + s;
                    acc.iter_mut()
                        .zip(&v[r * d..(r + 1) * d])
                        .for_each(|(a, x)| *a += w * x);
                }
            }
            acc.iter_mut().for_each(|a| *a /= c);
        }
        Ok(self.push(
            vec![batch, d],
            out,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                counts,
            },
        ))
    }

    /// Scales each row to unit L2 norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.dims2(x, "normalize_rows")?;
        let v = self.value(x);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.len());
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numeric(format!(
                    "row {r} has norm {n}; cosine similarity is undefined"
                )));
            }
            norms.push(n);
            out.extend(row.iter().map(|x| x / n));
        }
        Ok(self.push(vec![rows, d], out, Op::NormalizeRows { x, norms }))
    }

    /// Row-wise cosine similarity of two `[n, d]` matrices, giving `[n]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_similarity")?;
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        let prod = self.mul(an, bn)?;
        self.sum_last_axis(prod)
    }

    /// All-pairs cosine similarity `[n, d] × [m, d]` → `[n, m]`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&cols, lead)) = shape.split_last() else {
            return Err(Error::Shape("sum_last_axis: scalar input".into()));
        };
        let out = self.value(x).chunks(cols).map(|r| r.iter().sum()).collect();
        Ok(self.push(lead.to_vec(), out, Op::SumLastAxis(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x))
    }

    /// Summed negative log-likelihood of integer targets under row-wise
    /// softmax of `[n, vocab]` logits. Rows with zero mask contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
        let (n, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets and {} mask entries for logits {:?}",
                targets.len(),
                mask.len(),
                self.shape(logits)
            )));
        }
        if let Some(&bad) = targets.iter().zip(mask).find(|(&t, &m)| m != 0.0 && t >= vocab).map(|(t, _)| t) {
            return Err(Error::Shape(format!(
                "cross_entropy: target {bad} out of range for vocabulary {vocab}"
            )));
        }
        let v = self.value(logits);
        let mut probs = vec![0.0; v.len()];
        let mut total = 0.0;
        for r in 0..n {
            let row = &v[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = 0.0;
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|pj| *pj /= z);
            if mask[r] != 0.0 {
                total += mask[r] * (max + z.ln() - row[targets[r]]);
            }
        }
        Ok(self.push(
            Vec::new(),
            vec![total],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        ))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates d(root)/d(leaf) into every leaf reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward: root must be a scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(dout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[id] {
                    Some(acc) => add_into(acc, &dout),
                    slot => *slot = Some(dout),
                }
                continue;
            }
            self.backward_node(id, &dout, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, dout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].needs_grad;
        // Returns the gradient buffer of `v`, zero-initialized on first touch.
        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }
        let node = &nodes[id];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if wants(a) {
                    let da = slot(grads, nodes, *a);
                    gemm(m, n, k, dout, (n, 1), &nodes[b.0].value, (1, n), 1.0, da);
                }
                if wants(b) {
                    let db = slot(grads, nodes, *b);
                    gemm(k, m, n, &nodes[a.0].value, (1, k), dout, (n, 1), 1.0, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (g, m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1], nodes[a.0].shape[2]);
                let n = node.shape[2];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(a) {
                    let da = slot(grads, nodes, *a);
                    // da = dc · Bᵀ where B is [k,n] (or stored [n,k] when transposed)
                    let bt_strides = if *trans_b { (k, 1) } else { (1, n) };
                    for i in 0..g {
                        gemm(
                            m,
                            n,
                            k,
                            &dout[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &bv[i * k * n..(i + 1) * k * n],
                            bt_strides,
                            1.0,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if wants(b) {
                    let db = slot(grads, nodes, *b);
                    for i in 0..g {
                        let a_i = &av[i * m * k..(i + 1) * m * k];
                        let d_i = &dout[i * m * n..(i + 1) * m * n];
                        let db_i = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // d(bᵀ) = aᵀ·dc, so db = dcᵀ·a : [n,m]·[m,k]
                            gemm(n, m, k, d_i, (1, n), a_i, (k, 1), 1.0, db_i);
                        } else {
                            gemm(k, m, n, a_i, (1, k), d_i, (n, 1), 1.0, db_i);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let da = slot(grads, nodes, *a);
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += dout[j * m + i];
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    add_into(slot(grads, nodes, *a), dout);
                }
                if wants(b) {
                    add_into(slot(grads, nodes, *b), dout);
                }
            }
            Op::AddBias(a, bias) => {
                if wants(a) {
                    add_into(slot(grads, nodes, *a), dout);
                }
                if wants(bias) {
                    let cols = nodes[bias.0].value.len();
                    let db = slot(grads, nodes, *bias);
                    for row in dout.chunks(cols) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bv = &nodes[b.0].value;
                    let da = slot(grads, nodes, *a);
                    for ((d, g), y) in da.iter_mut().zip(dout).zip(bv) {
                        *d += g * y;
                    }
                }
                if wants(b) {
                    let av = &nodes[a.0].value;
                    let db = slot(grads, nodes, *b);
                    for ((d, g), x) in db.iter_mut().zip(dout).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                let da = slot(grads, nodes, *a);
                da.iter_mut().zip(dout).for_each(|(d, g)| *d += g * s);
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                let da = slot(grads, nodes, *a);
                for ((d, g), x) in da.iter_mut().zip(dout).zip(av) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                let dx = slot(grads, nodes, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| dout[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] += y[idx(j)] * (dout[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::LogSumExp { x, probs } => {
                let cols = *nodes[x.0].shape.last().unwrap();
                let dx = slot(grads, nodes, *x);
                for (r, g) in dout.iter().enumerate() {
                    for j in 0..cols {
                        dx[r * cols + j] += g * probs[r * cols + j];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = nodes[gain.0].value.len();
                let rows = rstd.len();
                let g = &nodes[gain.0].value;
                if wants(x) {
                    let dx = slot(grads, nodes, *x);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let (dy, xh) = (&dout[r * cols..(r + 1) * cols], &xhat[r * cols..(r + 1) * cols]);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            dxhat[j] = dy[j] * g[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for j in 0..cols {
                            dx[r * cols + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                if wants(gain) {
                    let dg = slot(grads, nodes, *gain);
                    for (dy, xh) in dout.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            dg[j] += dy[j] * xh[j];
                        }
                    }
                }
                if wants(bias) {
                    let db = slot(grads, nodes, *bias);
                    for dy in dout.chunks(cols) {
                        add_into(db, dy);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].shape[1];
                let dt = slot(grads, nodes, *table);
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut dt[i * d..(i + 1) * d], &dout[r * d..(r + 1) * d]);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for p in parts {
                        let chunk = nodes[p.0].shape[*axis] * inner;
                        if wants(p) {
                            let dp = slot(grads, nodes, *p);
                            add_into(&mut dp[o * chunk..(o + 1) * chunk], &dout[offset..offset + chunk]);
                        }
                        offset += chunk;
                    }
                }
            }
            Op::SplitHeads { x, batch, heads } => {
                let (seq, dh) = (node.shape[1], node.shape[2]);
                let width = heads * dh;
                let dx = slot(grads, nodes, *x);
                for b in 0..*batch {
                    for h in 0..*heads {
                        for s in 0..seq {
                            let src = (b * seq + s) * width + h * dh;
                            let dst = ((b * heads + h) * seq + s) * dh;
                            add_into(&mut dx[src..src + dh], &dout[dst..dst + dh]);
                        }
                    }
                }
            }
            Op::MergeHeads { x, batch, heads } => {
                let (seq, dh) = (nodes[x.0].shape[1], nodes[x.0].shape[2]);
                let width = heads * dh;
                let dx = slot(grads, nodes, *x);
                for b in 0..*batch {
                    for h in 0..*heads {
                        for s in 0..seq {
                            let dst = (b * seq + s) * width + h * dh;
                            let src = ((b * heads + h) * seq + s) * dh;
                            add_into(&mut dx[src..src + dh], &dout[dst..dst + dh]);
                        }
                    }
                }
            }
            Op::MaskedMean { x, mask, counts } => {
                let d = node.shape[1];
                let batch = counts.len();
                let seq = mask.len() / batch;
                let dx = slot(grads, nodes, *x);
                for b in 0..batch {
                    for s in 0..seq {
                        let w = mask[b * seq + s] / counts[b];
                        if w != 0.0 {
                            let r = b * seq + s;
                            for j in 0..d {
                                dx[r * d + j] += w * dout[b * d + j];
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let d = node.shape[1];
                let y = &node.value;
                let dx = slot(grads, nodes, *x);
                for (r, n) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &dout[r * d..(r + 1) * d]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] += (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
            Op::SumLastAxis(x) => {
                let cols = *nodes[x.0].shape.last().unwrap();
                let dx = slot(grads, nodes, *x);
                for (r, g) in dout.iter().enumerate() {
                    dx[r * cols..(r + 1) * cols].iter_mut().for_each(|d| *d += g);
                }
            }
            Op::Sum(x) => {
                let g = dout[0];
                slot(grads, nodes, *x).iter_mut().for_each(|d| *d += g);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let vocab = nodes[logits.0].shape[1];
                let g = dout[0];
                let dl = slot(grads, nodes, *logits);
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if m == 0.0 {
                        continue;
                    }
                    let w = g * m;
                    for j in 0..vocab {
                        dl[r * vocab + j] += w * probs[r * vocab + j];
                    }
                    dl[r * vocab + t] -= w;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..numel(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Central-difference check of d(sum(w ⊙ f(inputs)))/d(inputs) with a
    /// fixed random weighting `w`, so every output entry matters.
    fn check<F>(inputs: &[Tensor], f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let objective = |ins: &[Tensor], weights: Option<&Tensor>| -> (f64, Tape, Vec<Var>, Tensor) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
            let out = f(&mut tape, &vars).unwrap();
            let w = match weights {
                Some(w) => w.clone(),
                None => {
                    let shape = tape.shape(out).to_vec();
                    let mut r = ChaCha8Rng::seed_from_u64(7);
                    random(&shape, &mut r)
                }
            };
            let wv = tape.constant(w.clone());
            let prod = tape.mul(out, wv).unwrap();
            let total = tape.sum(prod);
            (tape.item(total), tape, vars, w)
        };
        let (_, mut tape, vars, w) = objective(inputs, None);
        let root = Var(tape.len() - 1);
        tape.backward(root).unwrap();
        let h = 1e-4;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; input.numel()]);
            let mut numeric = vec![0.0; input.numel()];
            for j in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                numeric[j] = (objective(&plus, Some(&w)).0 - objective(&minus, Some(&w)).0) / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
            let rel = if scale == 0.0 { 0.0 } else { diff / scale };
            assert!(rel < 1e-4, "input {i}: relative error {rel}");
        }
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c), &[3.0, 4.0, 5.0, 6.0]);
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let y = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let z = t.matmul(x, y).unwrap();
        assert_eq!(t.value(z), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("dimension"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum_is_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[4, 3], &mut rng);
        let b = random(&[3, 5], &mut rng);
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(&a), t.leaf(&b));
        let c = t.matmul(va, vb).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        let ga = t.grad(va).unwrap();
        for i in 0..4 {
            for k in 0..3 {
                let row_sum: f64 = b.row(k).iter().sum();
                assert!((ga[i * 3 + k] - row_sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        for v in t.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        assert!(t.value(y).iter().all(|v| v.is_finite()));
        assert!((t.value(y)[0] - 1.0).abs() < 1e-15 && t.value(y)[1] < 1e-300);
        assert!(t.softmax(x, 1).is_err());
    }

    #[test]
    fn layer_norm_limits() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let b = t.constant(Tensor::zeros(&[3]));
        let x = t.constant(Tensor::new(vec![1, 3], vec![2.5; 3]).unwrap());
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 0.0]);

        let g = t.constant(Tensor::new(vec![2], vec![1.0; 2]).unwrap());
        let b = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((t.value(y)[0] - 1.0).abs() < 1e-10 && (t.value(y)[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn gradcheck_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(4, 3, 5), (1, 2, 1), (3, 6, 2)] {
            check(&[random(&[m, k], &mut rng), random(&[k, n], &mut rng)], |t, v| t.matmul(v[0], v[1]));
        }
        for &(g, m, k, n) in &[(2, 3, 4, 2), (1, 1, 3, 3), (3, 2, 2, 4)] {
            check(&[random(&[g, m, k], &mut rng), random(&[g, k, n], &mut rng)], |t, v| t.batch_matmul(v[0], v[1], false));
            check(&[random(&[g, m, k], &mut rng), random(&[g, n, k], &mut rng)], |t, v| t.batch_matmul(v[0], v[1], true));
        }
        for shape in [[2, 3], [5, 1], [4, 4]] {
            let a = random(&shape, &mut rng);
            check(&[a.clone(), random(&shape, &mut rng)], |t, v| t.add(v[0], v[1]));
            check(&[a.clone(), random(&shape, &mut rng)], |t, v| t.mul(v[0], v[1]));
            check(&[a.clone(), random(&[shape[1]], &mut rng)], |t, v| t.add_bias(v[0], v[1]));
            check(std::slice::from_ref(&a), |t, v| Ok(t.scale(v[0], -2.5)));
            check(std::slice::from_ref(&a), |t, v| Ok(t.relu(v[0])));
            check(std::slice::from_ref(&a), |t, v| t.transpose(v[0]));
            check(std::slice::from_ref(&a), |t, v| t.log_sum_exp(v[0]));
            check(std::slice::from_ref(&a), |t, v| t.sum_last_axis(v[0]));
            check(std::slice::from_ref(&a), |t, v| t.normalize_rows(v[0]));
            check(&[a.clone(), random(&shape, &mut rng)], |t, v| t.cosine_similarity(v[0], v[1]));
            check(&[a.clone(), random(&[3, shape[1]], &mut rng)], |t, v| t.cosine_matrix(v[0], v[1]));
            check(
                &[a.clone(), random(&[shape[1]], &mut rng), random(&[shape[1]], &mut rng)],
                |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
            );
        }
        for shape in [vec![5], vec![3, 4], vec![2, 3, 2]] {
            let x = random(&shape, &mut rng);
            for axis in 0..shape.len() {
                check(std::slice::from_ref(&x), move |t, v| t.softmax(v[0], axis));
            }
        }
        for (v, d, ids) in [(5, 3, vec![0, 4, 4, 1]), (2, 2, vec![1]), (4, 6, vec![3, 2, 1, 0, 0])] {
            check(&[random(&[v, d], &mut rng)], move |t, vars| t.embedding(vars[0], &ids));
        }
        for axis in 0..2 {
            check(&[random(&[2, 3], &mut rng), random(&[2, 3], &mut rng)], move |t, v| t.concat(v, axis));
        }
        check(&[random(&[1, 2], &mut rng), random(&[1, 5], &mut rng)], |t, v| t.concat(v, 1));
        check(&[random(&[3, 2], &mut rng), random(&[1, 2], &mut rng), random(&[2, 2], &mut rng)], |t, v| t.concat(v, 0));
        for (b, s, h, dh) in [(2, 3, 2, 2), (1, 4, 4, 1), (3, 1, 1, 3)] {
            let x = random(&[b * s, h * dh], &mut rng);
            check(std::slice::from_ref(&x), move |t, v| t.split_heads(v[0], b, h));
            let y = random(&[b * h, s, dh], &mut rng);
            check(&[y], move |t, v| t.merge_heads(v[0], b, h));
        }
        for (b, s, mask) in [(2, 3, vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0]), (1, 2, vec![1.0, 1.0]), (3, 1, vec![1.0; 3])] {
            let x = random(&[b * s, 4], &mut rng);
            check(&[x], move |t, v| t.masked_mean(v[0], &mask, b));
        }
        for (n, vocab, targets, mask) in [
            (3, 5, vec![0, 4, 2], vec![1.0, 1.0, 0.0]),
            (1, 2, vec![1], vec![1.0]),
            (4, 3, vec![2, 2, 0, 1], vec![1.0, 0.0, 1.0, 1.0]),
        ] {
            check(&[random(&[n, vocab], &mut rng)], move |t, v| t.cross_entropy(v[0], &targets, &mask));
        }
    }

    #[test]
    fn backward_twice_doubles_leaf_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(&a), t.leaf(&b));
        let c = t.matmul(va, vb).unwrap();
        let r = t.relu(c);
        let s = t.softmax(r, 1).unwrap();
        let l = t.sum(s);
        let sq = t.mul(c, c).unwrap();
        let l2 = t.sum(sq);
        let total = t.add(l, l2).unwrap();
        t.backward(total).unwrap();
        let once: Vec<Vec<f64>> = [va, vb].iter().map(|v| t.grad(*v).unwrap().to_vec()).collect();
        t.backward(total).unwrap();
        for (v, g1) in [va, vb].iter().zip(&once) {
            for (x, y) in t.grad(*v).unwrap().iter().zip(g1) {
                assert_eq!(*x, 2.0 * y);
            }
        }
    }

    #[test]
    fn tape_is_topological() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.transpose(a).unwrap();
        let c = t.matmul(a, b).unwrap();
        let d = t.sum(c);
        for id in 0..t.len() {
            for input in t.inputs(Var(id)) {
                assert!(input.0 < id);
            }
        }
        assert_eq!(d.index(), t.len() - 1);
    }

    #[test]
    fn errors_on_bad_inputs() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.normalize_rows(z), Err(Error::Numeric(_))));
        assert!(t.masked_mean(z, &[0.0, 0.0], 2).is_err());
        assert!(t.embedding(z, &[5]).is_err());
        assert!(t.backward(z).is_err());
    }
}
