use std::sync::Arc;

use rayon::prelude::*;

use super::tensor::Tensor;
use super::{sigmoid, softplus, Real, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Additive mask entries at or below this threshold are treated as the
/// -inf sentinel: the corresponding softmax outputs are exactly zero.
pub const MASK_NEG_INF: f64 = -1e9;
const MASKED_THRESHOLD: f64 = -1e8;

type Consts<E> = Arc<Vec<E>>;

#[derive(Debug, Clone)]
enum Op<E: Real> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// [r,c] + row broadcast of a [c] vector.
    AddRowBroadcast(TensorId, TensorId),
    /// [reps*t, c] + tile repeated `reps` times of a [t, c] tensor.
    AddTiledRows {
        x: TensorId,
        tile: TensorId,
        reps: usize,
    },
    Scale(TensorId, E),
    AddScalar(TensorId),
    /// Elementwise addition of a constant buffer (masks, offsets).
    AddConstBuf(TensorId),
    /// Elementwise product with a constant mask (dropout, validity masks).
    MulConstMask(TensorId, Consts<E>),
    /// Tensor times a scalar node (broadcast).
    MulScalarNode {
        x: TensorId,
        s: TensorId,
    },
    /// [m,k] @ [k,n]
    Matmul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// [m,k] @ [n,k]^T
    MatmulTransposeB {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(TensorId),
    Sigmoid(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Softplus(TensorId),
    Clamp(TensorId, E, E),
    /// Row-wise softmax of x plus an optional additive mask. The mask has
    /// `mask_rows` rows applied cyclically (row i of x uses mask row
    /// i % mask_rows), which lets a single [T,T] causal mask serve a
    /// [B*H*T, T] score block.
    SoftmaxRows {
        x: TensorId,
        mask: Option<Consts<E>>,
        mask_rows: usize,
        cols: usize,
    },
    /// Per-row normalization over the last dimension with learnable gain
    /// and bias vectors.
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        dim: usize,
    },
    /// out[r, :] = table[idx[r], :]; scatter-add backward.
    GatherRows {
        table: TensorId,
        idx: Arc<Vec<u32>>,
        dim: usize,
    },
    /// out[r] = sum_j a[r,j] * b[r,j]
    RowDot(TensorId, TensorId, usize),
    /// out[i, :] = x[rows[i], :]
    SelectRows {
        x: TensorId,
        rows: Arc<Vec<usize>>,
        dim: usize,
    },
    /// Weighted sum over the rows of each [t, c] block:
    /// out[b, :] = sum_t w[b*t_len + t] * x[b*t_len + t, :].
    PoolBlocks {
        x: TensorId,
        weights: Consts<E>,
        blocks: usize,
        block_rows: usize,
        cols: usize,
    },
    SumAll(TensorId),
    /// Per-group score block: out rows (g,t) = q_g @ k_g^T for g in 0..groups.
    AttnScores {
        q: TensorId,
        k: TensorId,
        groups: usize,
        rows: usize,
        dim: usize,
    },
    /// Per-group apply: out rows (g,t) = w_g @ v_g.
    AttnApply {
        w: TensorId,
        v: TensorId,
        groups: usize,
        rows: usize,
        dim: usize,
    },
    /// [b*t, h*dh] -> [b*h*t, dh]
    SplitHeads {
        x: TensorId,
        batch: usize,
        rows: usize,
        heads: usize,
        head_dim: usize,
    },
    /// Inverse of SplitHeads.
    MergeHeads {
        x: TensorId,
        batch: usize,
        rows: usize,
        heads: usize,
        head_dim: usize,
    },
    ConcatCols(TensorId, TensorId, usize, usize),
    /// Stable log-sum-exp per row, [r,c] -> [r].
    LogSumExpRows(TensorId, usize),
    /// Diagonal of a square matrix, [n,n] -> [n].
    TakeDiag(TensorId, usize),
}

struct Node<E: Real> {
    values: Vec<E>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<E>,
}

/// Reverse-mode Wengert tape. Nodes are appended in topological order
/// during the forward pass; `backward` replays them in reverse.
pub struct Tape<E: Real> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf node, copying the tensor's values.
    pub fn leaf(&mut self, t: &Tensor<E>) -> TensorId {
        self.push_leaf(t.values().to_vec(), t.shape().to_vec(), t.requires_grad())
    }

    /// Registers a constant (non-differentiable) leaf from raw values.
    pub fn constant(&mut self, values: Vec<E>, shape: Vec<usize>) -> TensorId {
        self.push_leaf(values, shape, false)
    }

    fn push_leaf(&mut self, values: Vec<E>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            values,
            shape,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    pub fn values(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].values.len()
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, id: TensorId) -> E {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].values[0]
    }

    /// Gradient of the loss w.r.t. this node, if any flowed to it.
    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient with unreached leaves reported as zeros.
    pub fn grad_or_zeros(&self, id: TensorId) -> Vec<E> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![E::ZERO; self.nodes[id.0].values.len()],
        }
    }

    fn rows_cols(&self, id: TensorId, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(id);
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected matrix, got shape {:?}", s),
            }),
        }
    }

    fn record(
        &mut self,
        op: Op<E>,
        inputs: &[TensorId],
        values: Vec<E>,
        shape: Vec<usize>,
        name: &'static str,
    ) -> Result<TensorId, TensorError> {
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: name,
                index: idx,
            });
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            values,
            shape,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn check_same_shape(
        &self,
        a: TensorId,
        b: TensorId,
        op: &'static str,
    ) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    // ── Elementwise and linear ops ───────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape(a, b, "add")?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(Op::Add(a, b), &[a, b], values, shape, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape(a, b, "sub")?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(Op::Sub(a, b), &[a, b], values, shape, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape(a, b, "mul")?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(Op::Mul(a, b), &[a, b], values, shape, "mul")
    }

    /// [r,c] plus a [c] vector added to every row.
    pub fn add_row_broadcast(&mut self, x: TensorId, row: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.rows_cols(x, "add_row_broadcast")?;
        if self.numel(row) != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("row has {} elements, expected {}", self.numel(row), c),
            });
        }
        let mut values = self.values(x).to_vec();
        let rv = self.values(row);
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] = values[i * c + j] + rv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.record(Op::AddRowBroadcast(x, row), &[x, row], values, shape, "add_row_broadcast")
    }

    /// [reps*t, c] plus a [t, c] tensor repeated `reps` times along rows.
    pub fn add_tiled_rows(
        &mut self,
        x: TensorId,
        tile: TensorId,
        reps: usize,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.rows_cols(x, "add_tiled_rows")?;
        let (tr, tc) = self.rows_cols(tile, "add_tiled_rows")?;
        if tc != c || tr * reps != r {
            return Err(TensorError::ShapeMismatch {
                op: "add_tiled_rows",
                detail: format!("x {:?} vs tile {:?} x{}", self.shape(x), self.shape(tile), reps),
            });
        }
        let mut values = self.values(x).to_vec();
        let tv = self.values(tile);
        for rep in 0..reps {
            let base = rep * tr * c;
            for i in 0..tr * c {
                values[base + i] = values[base + i] + tv[i];
            }
        }
        let shape = self.shape(x).to_vec();
        self.record(Op::AddTiledRows { x, tile, reps }, &[x, tile], values, shape, "add_tiled_rows")
    }

    pub fn scale(&mut self, x: TensorId, c: E) -> Result<TensorId, TensorError> {
        let values = self.values(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Scale(x, c), &[x], values, shape, "scale")
    }

    pub fn add_scalar(&mut self, x: TensorId, c: E) -> Result<TensorId, TensorError> {
        let values = self.values(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::AddScalar(x), &[x], values, shape, "add_scalar")
    }

    /// Elementwise addition of a constant buffer of the same size.
    pub fn add_const_buf(&mut self, x: TensorId, consts: &[E]) -> Result<TensorId, TensorError> {
        if consts.len() != self.numel(x) {
            return Err(TensorError::ShapeMismatch {
                op: "add_const_buf",
                detail: format!("consts len {} vs tensor {}", consts.len(), self.numel(x)),
            });
        }
        let values = self
            .values(x)
            .iter()
            .zip(consts)
            .map(|(&v, &c)| v + c)
            .collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::AddConstBuf(x), &[x], values, shape, "add_const_buf")
    }

    /// Elementwise product with a constant mask of the same size.
    pub fn mul_const_mask(&mut self, x: TensorId, mask: Arc<Vec<E>>) -> Result<TensorId, TensorError> {
        if mask.len() != self.numel(x) {
            return Err(TensorError::ShapeMismatch {
                op: "mul_const_mask",
                detail: format!("mask len {} vs tensor {}", mask.len(), self.numel(x)),
            });
        }
        let values = self
            .values(x)
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::MulConstMask(x, mask), &[x], values, shape, "mul_const_mask")
    }

    /// Tensor times a scalar node, broadcast over all elements.
    pub fn mul_scalar_node(&mut self, x: TensorId, s: TensorId) -> Result<TensorId, TensorError> {
        if self.numel(s) != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "mul_scalar_node",
                detail: format!("scalar operand has {} elements", self.numel(s)),
            });
        }
        let sv = self.values(s)[0];
        let values = self.values(x).iter().map(|&v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::MulScalarNode { x, s }, &[x, s], values, shape, "mul_scalar_node")
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {} vs {}", ka, kb),
            });
        }
        let mut values = vec![E::ZERO; m * n];
        par_gemm(false, false, m, ka, n, E::ONE, self.values(a), self.values(b), E::ZERO, &mut values);
        self.record(
            Op::Matmul { a, b, m, k: ka, n },
            &[a, b],
            values,
            vec![m, n],
            "matmul",
        )
    }

    /// a [m,k] times b^T where b is [n,k].
    pub fn matmul_transpose_b(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = self.rows_cols(a, "matmul_transpose_b")?;
        let (n, kb) = self.rows_cols(b, "matmul_transpose_b")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_transpose_b",
                detail: format!("inner dims {} vs {}", ka, kb),
            });
        }
        let mut values = vec![E::ZERO; m * n];
        par_gemm(false, true, m, ka, n, E::ONE, self.values(a), self.values(b), E::ZERO, &mut values);
        self.record(
            Op::MatmulTransposeB { a, b, m, k: ka, n },
            &[a, b],
            values,
            vec![m, n],
            "matmul_transpose_b",
        )
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let values = self
            .values(x)
            .iter()
            .map(|&v| v.maximum(E::ZERO))
            .collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Relu(x), &[x], values, shape, "relu")
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let values = self.values(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Sigmoid(x), &[x], values, shape, "sigmoid")
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let values = self.values(x).iter().map(|&v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Exp(x), &[x], values, shape, "exp")
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        if let Some(idx) = self.values(x).iter().position(|&v| v <= E::ZERO) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!(
                    "non-positive input {} at flat index {}",
                    self.values(x)[idx],
                    idx
                ),
            });
        }
        let values = self.values(x).iter().map(|&v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Log(x), &[x], values, shape, "log")
    }

    pub fn softplus(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let values = self.values(x).iter().map(|&v| softplus(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Softplus(x), &[x], values, shape, "softplus")
    }

    /// Clamp with pass-through gradient inside [lo, hi], zero outside.
    pub fn clamp(&mut self, x: TensorId, lo: E, hi: E) -> Result<TensorId, TensorError> {
        let values = self
            .values(x)
            .iter()
            .map(|&v| v.maximum(lo).minimum(hi))
            .collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::Clamp(x, lo, hi), &[x], values, shape, "clamp")
    }

    /// Row-wise softmax with an optional additive mask. Mask rows are
    /// applied cyclically so a [t,t] mask can serve stacked score blocks.
    /// Mask entries at or below the -inf sentinel zero the output exactly;
    /// a fully-masked row is an error.
    pub fn softmax_rows(
        &mut self,
        x: TensorId,
        mask: Option<Arc<Vec<E>>>,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.rows_cols(x, "softmax_rows")?;
        let mask_rows = match &mask {
            Some(m) => {
                if m.len() % c != 0 || m.is_empty() || r % (m.len() / c) != 0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "softmax_rows",
                        detail: format!("mask len {} incompatible with [{}, {}]", m.len(), r, c),
                    });
                }
                m.len() / c
            }
            None => 1,
        };
        let threshold = E::from_f64(MASKED_THRESHOLD);
        let xv = self.values(x);
        let mut values = vec![E::ZERO; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mrow = mask
                .as_ref()
                .map(|m| &m[(i % mask_rows) * c..(i % mask_rows + 1) * c]);
            let mut max = E::from_f64(f64::NEG_INFINITY);
            let mut any_allowed = false;
            for j in 0..c {
                let masked = mrow.map(|m| m[j] <= threshold).unwrap_or(false);
                if !masked {
                    any_allowed = true;
                    let v = row[j] + mrow.map(|m| m[j]).unwrap_or(E::ZERO);
                    if v > max {
                        max = v;
                    }
                }
            }
            if !any_allowed {
                return Err(TensorError::FullyMaskedRow { row: i });
            }
            let mut sum = E::ZERO;
            for j in 0..c {
                let masked = mrow.map(|m| m[j] <= threshold).unwrap_or(false);
                let e = if masked {
                    E::ZERO
                } else {
                    let v = row[j] + mrow.map(|m| m[j]).unwrap_or(E::ZERO);
                    (v - max).exp()
                };
                values[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                values[i * c + j] = values[i * c + j] / sum;
            }
        }
        let shape = self.shape(x).to_vec();
        self.record(
            Op::SoftmaxRows {
                x,
                mask,
                mask_rows,
                cols: c,
            },
            &[x],
            values,
            shape,
            "softmax_rows",
        )
    }

    /// Per-row layer normalization over the last dimension, with learnable
    /// gain and bias. The pre-gain output of each row has mean 0 and unit
    /// variance (stabilized by a small epsilon).
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (r, d) = self.rows_cols(x, "layer_norm")?;
        if self.numel(gain) != d || self.numel(bias) != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain/bias sizes {}/{} vs dim {}",
                    self.numel(gain),
                    self.numel(bias),
                    d
                ),
            });
        }
        let eps = E::from_f64(LAYER_NORM_EPS);
        let inv_d = E::ONE / E::from_f64(d as f64);
        let xv = self.values(x);
        let gv = self.values(gain);
        let bv = self.values(bias);
        let mut values = vec![E::ZERO; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mut mean = E::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = E::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let istd = E::ONE / (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * istd;
                values[i * d + j] = gv[j] * xhat + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.record(
            Op::LayerNorm { x, gain, bias, dim: d },
            &[x, gain, bias],
            values,
            shape,
            "layer_norm",
        )
    }

    /// Embedding lookup: out row r is table row idx[r].
    pub fn gather_rows(&mut self, table: TensorId, idx: Arc<Vec<u32>>) -> Result<TensorId, TensorError> {
        let (v, d) = self.rows_cols(table, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| (i as usize) >= v) {
            return Err(TensorError::Domain {
                op: "gather_rows",
                detail: format!("index {} out of range for table with {} rows", bad, v),
            });
        }
        let tv = self.values(table);
        let mut values = vec![E::ZERO; idx.len() * d];
        for (r, &i) in idx.iter().enumerate() {
            values[r * d..(r + 1) * d].copy_from_slice(&tv[(i as usize) * d..(i as usize + 1) * d]);
        }
        let shape = vec![idx.len(), d];
        self.record(Op::GatherRows { table, idx, dim: d }, &[table], values, shape, "gather_rows")
    }

    /// Per-row dot product of two same-shape matrices, -> [r].
    pub fn row_dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape(a, b, "row_dot")?;
        let (r, d) = self.rows_cols(a, "row_dot")?;
        let av = self.values(a);
        let bv = self.values(b);
        let values = (0..r)
            .map(|i| {
                let mut s = E::ZERO;
                for j in 0..d {
                    s += av[i * d + j] * bv[i * d + j];
                }
                s
            })
            .collect();
        self.record(Op::RowDot(a, b, d), &[a, b], values, vec![r], "row_dot")
    }

    /// Select rows by index (no bounds wrap); backward scatter-adds.
    pub fn select_rows(&mut self, x: TensorId, rows: Arc<Vec<usize>>) -> Result<TensorId, TensorError> {
        let (r, d) = self.rows_cols(x, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::Domain {
                op: "select_rows",
                detail: format!("row {} out of range for {} rows", bad, r),
            });
        }
        let xv = self.values(x);
        let mut values = vec![E::ZERO; rows.len() * d];
        for (i, &src) in rows.iter().enumerate() {
            values[i * d..(i + 1) * d].copy_from_slice(&xv[src * d..(src + 1) * d]);
        }
        let shape = vec![rows.len(), d];
        self.record(Op::SelectRows { x, rows, dim: d }, &[x], values, shape, "select_rows")
    }

    /// Weighted row-pool per block: x is [blocks*block_rows, c], weights is
    /// one scalar per row, out is [blocks, c].
    pub fn pool_blocks(
        &mut self,
        x: TensorId,
        weights: Arc<Vec<E>>,
        blocks: usize,
        block_rows: usize,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.rows_cols(x, "pool_blocks")?;
        if r != blocks * block_rows || weights.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "pool_blocks",
                detail: format!(
                    "rows {} vs {}x{}, weights {}",
                    r,
                    blocks,
                    block_rows,
                    weights.len()
                ),
            });
        }
        let xv = self.values(x);
        let mut values = vec![E::ZERO; blocks * c];
        for b in 0..blocks {
            for t in 0..block_rows {
                let w = weights[b * block_rows + t];
                if w == E::ZERO {
                    continue;
                }
                let src = (b * block_rows + t) * c;
                for j in 0..c {
                    values[b * c + j] += w * xv[src + j];
                }
            }
        }
        self.record(
            Op::PoolBlocks {
                x,
                weights,
                blocks,
                block_rows,
                cols: c,
            },
            &[x],
            values,
            vec![blocks, c],
            "pool_blocks",
        )
    }

    /// Mean over the rows of a matrix, -> [c].
    pub fn mean_pool_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (r, _c) = self.rows_cols(x, "mean_pool_rows")?;
        if r == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_pool_rows",
                detail: "cannot pool zero rows".into(),
            });
        }
        let w = E::ONE / E::from_f64(r as f64);
        let weights = Arc::new(vec![w; r]);
        let pooled = self.pool_blocks(x, weights, 1, r)?;
        let c = self.numel(pooled);
        self.nodes[pooled.0].shape = vec![c];
        Ok(pooled)
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let mut s = E::ZERO;
        for &v in self.values(x) {
            s += v;
        }
        self.record(Op::SumAll(x), &[x], vec![s], vec![1], "sum_all")
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let n = self.numel(x);
        let s = self.sum_all(x)?;
        self.scale(s, E::ONE / E::from_f64(n as f64))
    }

    /// Grouped attention scores: q and k are [groups*rows, dim]; output row
    /// (g, i) holds q_{g,i} . k_{g,j} over j, i.e. a [rows, rows] block per
    /// group.
    pub fn attn_scores(
        &mut self,
        q: TensorId,
        k: TensorId,
        groups: usize,
        rows: usize,
    ) -> Result<TensorId, TensorError> {
        self.check_same_shape(q, k, "attn_scores")?;
        let (r, dim) = self.rows_cols(q, "attn_scores")?;
        if r != groups * rows {
            return Err(TensorError::ShapeMismatch {
                op: "attn_scores",
                detail: format!("rows {} vs {}x{}", r, groups, rows),
            });
        }
        let qv = self.values(q);
        let kv = self.values(k);
        let mut values = vec![E::ZERO; groups * rows * rows];
        block_par(groups, rows * rows, &mut values, |g, out| {
            let base = g * rows * dim;
            E::gemm(
                false,
                true,
                rows,
                dim,
                rows,
                E::ONE,
                &qv[base..base + rows * dim],
                &kv[base..base + rows * dim],
                E::ZERO,
                out,
            );
        });
        self.record(
            Op::AttnScores { q, k, groups, rows, dim },
            &[q, k],
            values,
            vec![groups * rows, rows],
            "attn_scores",
        )
    }

    /// Grouped attention apply: w is [groups*rows, rows], v is
    /// [groups*rows, dim]; per group out_g = w_g @ v_g.
    pub fn attn_apply(
        &mut self,
        w: TensorId,
        v: TensorId,
        groups: usize,
        rows: usize,
    ) -> Result<TensorId, TensorError> {
        let (wr, wc) = self.rows_cols(w, "attn_apply")?;
        let (vr, dim) = self.rows_cols(v, "attn_apply")?;
        if wr != groups * rows || wc != rows || vr != groups * rows {
            return Err(TensorError::ShapeMismatch {
                op: "attn_apply",
                detail: format!(
                    "w [{},{}], v [{},{}] vs groups {} rows {}",
                    wr, wc, vr, dim, groups, rows
                ),
            });
        }
        let wv = self.values(w);
        let vv = self.values(v);
        let mut values = vec![E::ZERO; groups * rows * dim];
        block_par(groups, rows * dim, &mut values, |g, out| {
            E::gemm(
                false,
                false,
                rows,
                rows,
                dim,
                E::ONE,
                &wv[g * rows * rows..(g + 1) * rows * rows],
                &vv[g * rows * dim..(g + 1) * rows * dim],
                E::ZERO,
                out,
            );
        });
        self.record(
            Op::AttnApply { w, v, groups, rows, dim },
            &[w, v],
            values,
            vec![groups * rows, dim],
            "attn_apply",
        )
    }

    /// [batch*rows, heads*head_dim] -> [batch*heads*rows, head_dim].
    pub fn split_heads(
        &mut self,
        x: TensorId,
        batch: usize,
        rows: usize,
        heads: usize,
    ) -> Result<TensorId, TensorError> {
        let (r, d) = self.rows_cols(x, "split_heads")?;
        if r != batch * rows || d % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "split_heads",
                detail: format!("[{},{}] vs batch {} rows {} heads {}", r, d, batch, rows, heads),
            });
        }
        let head_dim = d / heads;
        let xv = self.values(x);
        let mut values = vec![E::ZERO; r * d];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..rows {
                    let src = ((b * rows + t) * d) + h * head_dim;
                    let dst = (((b * heads + h) * rows) + t) * head_dim;
                    values[dst..dst + head_dim].copy_from_slice(&xv[src..src + head_dim]);
                }
            }
        }
        self.record(
            Op::SplitHeads { x, batch, rows, heads, head_dim },
            &[x],
            values,
            vec![batch * heads * rows, head_dim],
            "split_heads",
        )
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(
        &mut self,
        x: TensorId,
        batch: usize,
        rows: usize,
        heads: usize,
    ) -> Result<TensorId, TensorError> {
        let (r, head_dim) = self.rows_cols(x, "merge_heads")?;
        if r != batch * heads * rows {
            return Err(TensorError::ShapeMismatch {
                op: "merge_heads",
                detail: format!("[{},{}] vs batch {} rows {} heads {}", r, head_dim, batch, rows, heads),
            });
        }
        let d = heads * head_dim;
        let xv = self.values(x);
        let mut values = vec![E::ZERO; batch * rows * d];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..rows {
                    let src = (((b * heads + h) * rows) + t) * head_dim;
                    let dst = ((b * rows + t) * d) + h * head_dim;
                    values[dst..dst + head_dim].copy_from_slice(&xv[src..src + head_dim]);
                }
            }
        }
        self.record(
            Op::MergeHeads { x, batch, rows, heads, head_dim },
            &[x],
            values,
            vec![batch * rows, d],
            "merge_heads",
        )
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ra, ca) = self.rows_cols(a, "concat_cols")?;
        let (rb, cb) = self.rows_cols(b, "concat_cols")?;
        if ra != rb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("row counts {} vs {}", ra, rb),
            });
        }
        let av = self.values(a);
        let bv = self.values(b);
        let mut values = vec![E::ZERO; ra * (ca + cb)];
        for i in 0..ra {
            values[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(&av[i * ca..(i + 1) * ca]);
            values[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        self.record(
            Op::ConcatCols(a, b, ca, cb),
            &[a, b],
            values,
            vec![ra, ca + cb],
            "concat_cols",
        )
    }

    /// Stable per-row log-sum-exp, [r,c] -> [r]. Entries at or below the
    /// -inf sentinel are excluded.
    pub fn logsumexp_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.rows_cols(x, "logsumexp_rows")?;
        let threshold = E::from_f64(MASKED_THRESHOLD);
        let xv = self.values(x);
        let mut values = vec![E::ZERO; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mut max = E::from_f64(f64::NEG_INFINITY);
            let mut any = false;
            for &v in row {
                if v > threshold {
                    any = true;
                    if v > max {
                        max = v;
                    }
                }
            }
            if !any {
                return Err(TensorError::FullyMaskedRow { row: i });
            }
            let mut sum = E::ZERO;
            for &v in row {
                if v > threshold {
                    sum += (v - max).exp();
                }
            }
            values[i] = max + sum.ln();
        }
        self.record(Op::LogSumExpRows(x, c), &[x], values, vec![r], "logsumexp_rows")
    }

    /// Diagonal of a square matrix, -> [n].
    pub fn take_diag(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.rows_cols(x, "take_diag")?;
        if r != c {
            return Err(TensorError::ShapeMismatch {
                op: "take_diag",
                detail: format!("matrix is [{}, {}]", r, c),
            });
        }
        let xv = self.values(x);
        let values = (0..r).map(|i| xv[i * c + i]).collect();
        self.record(Op::TakeDiag(x, r), &[x], values, vec![r], "take_diag")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss node. Populates gradients for every
    /// `requires_grad` node reachable from the loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.numel(loss) != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads[loss.0] = Some(vec![E::ONE]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            // Leaf gradients stay in place for the caller; interior node
            // gradients are consumed as the reverse sweep passes them.
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            self.backward_node(i);
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Vec<E>>], nodes: &[Node<E>], id: TensorId, update: impl FnOnce(&mut [E])) {
        if !nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![E::ZERO; nodes[id.0].values.len()]);
        }
        update(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn backward_node(&mut self, i: usize) {
        let g_out = self.grads[i].take().expect("gradient present");
        let op = self.nodes[i].op.clone();
        let out_values_idx = i;
        let Tape { nodes, grads } = self;

        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Tape::<E>::accumulate(grads, nodes, a, |d| add_into(d, &g_out));
                Tape::<E>::accumulate(grads, nodes, b, |d| add_into(d, &g_out));
            }
            Op::Sub(a, b) => {
                Tape::<E>::accumulate(grads, nodes, a, |d| add_into(d, &g_out));
                Tape::<E>::accumulate(grads, nodes, b, |d| {
                    for (x, &g) in d.iter_mut().zip(&g_out) {
                        *x = *x - g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].values;
                let bv = &nodes[b.0].values;
                Tape::<E>::accumulate(grads, nodes, a, |d| {
                    for ((x, &g), &y) in d.iter_mut().zip(&g_out).zip(bv) {
                        *x += g * y;
                    }
                });
                Tape::<E>::accumulate(grads, nodes, b, |d| {
                    for ((x, &g), &y) in d.iter_mut().zip(&g_out).zip(av) {
                        *x += g * y;
                    }
                });
            }
            Op::AddRowBroadcast(x, row) => {
                Tape::<E>::accumulate(grads, nodes, x, |d| add_into(d, &g_out));
                let c = nodes[row.0].values.len();
                Tape::<E>::accumulate(grads, nodes, row, |d| {
                    for (r, chunk) in g_out.chunks_exact(c).enumerate() {
                        let _ = r;
                        for (j, &g) in chunk.iter().enumerate() {
                            d[j] += g;
                        }
                    }
                });
            }
            Op::AddTiledRows { x, tile, reps } => {
                Tape::<E>::accumulate(grads, nodes, x, |d| add_into(d, &g_out));
                let tile_len = nodes[tile.0].values.len();
                Tape::<E>::accumulate(grads, nodes, tile, |d| {
                    for rep in 0..reps {
                        let base = rep * tile_len;
                        for j in 0..tile_len {
                            d[j] += g_out[base + j];
                        }
                    }
                });
            }
            Op::Scale(x, cst) => {
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for (v, &g) in d.iter_mut().zip(&g_out) {
                        *v += g * cst;
                    }
                });
            }
            Op::AddScalar(x) => {
                Tape::<E>::accumulate(grads, nodes, x, |d| add_into(d, &g_out));
            }
            Op::AddConstBuf(x) => {
                Tape::<E>::accumulate(grads, nodes, x, |d| add_into(d, &g_out));
            }
            Op::MulConstMask(x, mask) => {
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for ((v, &g), &m) in d.iter_mut().zip(&g_out).zip(mask.iter()) {
                        *v += g * m;
                    }
                });
            }
            Op::MulScalarNode { x, s } => {
                let sv = nodes[s.0].values[0];
                let xv = &nodes[x.0].values;
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for (v, &g) in d.iter_mut().zip(&g_out) {
                        *v += g * sv;
                    }
                });
                Tape::<E>::accumulate(grads, nodes, s, |d| {
                    let mut dot = E::ZERO;
                    for (&g, &xval) in g_out.iter().zip(xv) {
                        dot += g * xval;
                    }
                    d[0] += dot;
                });
            }
            Op::Matmul { a, b, m, k, n } => {
                let av = &nodes[a.0].values;
                let bv = &nodes[b.0].values;
                // d_a += g @ b^T ; d_b += a^T @ g
                Tape::<E>::accumulate(grads, nodes, a, |d| {
                    par_gemm(false, true, m, n, k, E::ONE, &g_out, bv, E::ONE, d);
                });
                Tape::<E>::accumulate(grads, nodes, b, |d| {
                    par_gemm(true, false, k, m, n, E::ONE, av, &g_out, E::ONE, d);
                });
            }
            Op::MatmulTransposeB { a, b, m, k, n } => {
                let av = &nodes[a.0].values;
                let bv = &nodes[b.0].values;
                // out = a @ b^T : d_a += g @ b ; d_b += g^T @ a
                Tape::<E>::accumulate(grads, nodes, a, |d| {
                    par_gemm(false, false, m, n, k, E::ONE, &g_out, bv, E::ONE, d);
                });
                Tape::<E>::accumulate(grads, nodes, b, |d| {
                    par_gemm(true, false, n, m, k, E::ONE, &g_out, av, E::ONE, d);
                });
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].values;
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for ((v, &g), &xi) in d.iter_mut().zip(&g_out).zip(xv) {
                        if xi > E::ZERO {
                            *v += g;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let ov = &nodes[out_values_idx].values;
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for ((v, &g), &o) in d.iter_mut().zip(&g_out).zip(ov) {
                        *v += g * o * (E::ONE - o);
                    }
                });
            }
            Op::Exp(x) => {
                let ov = &nodes[out_values_idx].values;
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for ((v, &g), &o) in d.iter_mut().zip(&g_out).zip(ov) {
                        *v += g * o;
                    }
                });
            }
            Op::Log(x) => {
                let xv = &nodes[x.0].values;
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for ((v, &g), &xi) in d.iter_mut().zip(&g_out).zip(xv) {
                        *v += g / xi;
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = &nodes[x.0].values;
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for ((v, &g), &xi) in d.iter_mut().zip(&g_out).zip(xv) {
                        *v += g * sigmoid(xi);
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = &nodes[x.0].values;
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for ((v, &g), &xi) in d.iter_mut().zip(&g_out).zip(xv) {
                        if xi >= lo && xi <= hi {
                            *v += g;
                        }
                    }
                });
            }
            Op::SoftmaxRows { x, cols, .. } => {
                let ov = &nodes[out_values_idx].values;
                let rows = ov.len() / cols;
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for r in 0..rows {
                        let base = r * cols;
                        let mut dot = E::ZERO;
                        for j in 0..cols {
                            dot += g_out[base + j] * ov[base + j];
                        }
                        for j in 0..cols {
                            d[base + j] += ov[base + j] * (g_out[base + j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, dim } => {
                let eps = E::from_f64(LAYER_NORM_EPS);
                let inv_d = E::ONE / E::from_f64(dim as f64);
                let xv = nodes[x.0].values.clone();
                let gv = nodes[gain.0].values.clone();
                let rows = xv.len() / dim;
                // Recompute per-row statistics.
                let mut xhat = vec![E::ZERO; xv.len()];
                let mut istds = vec![E::ZERO; rows];
                for r in 0..rows {
                    let row = &xv[r * dim..(r + 1) * dim];
                    let mut mean = E::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean = mean * inv_d;
                    let mut var = E::ZERO;
                    for &v in row {
                        let c = v - mean;
                        var += c * c;
                    }
                    var = var * inv_d;
                    let istd = E::ONE / (var + eps).sqrt();
                    istds[r] = istd;
                    for j in 0..dim {
                        xhat[r * dim + j] = (row[j] - mean) * istd;
                    }
                }
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for r in 0..rows {
                        let base = r * dim;
                        let mut mean_dxhat = E::ZERO;
                        let mut mean_dxhat_xhat = E::ZERO;
                        for j in 0..dim {
                            let dxhat = g_out[base + j] * gv[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat[base + j];
                        }
                        mean_dxhat = mean_dxhat * inv_d;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                        for j in 0..dim {
                            let dxhat = g_out[base + j] * gv[j];
                            d[base + j] +=
                                (dxhat - mean_dxhat - xhat[base + j] * mean_dxhat_xhat) * istds[r];
                        }
                    }
                });
                Tape::<E>::accumulate(grads, nodes, gain, |d| {
                    for r in 0..rows {
                        for j in 0..dim {
                            d[j] += g_out[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                });
                Tape::<E>::accumulate(grads, nodes, bias, |d| {
                    for r in 0..rows {
                        for j in 0..dim {
                            d[j] += g_out[r * dim + j];
                        }
                    }
                });
            }
            Op::GatherRows { table, idx, dim } => {
                Tape::<E>::accumulate(grads, nodes, table, |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = (i as usize) * dim;
                        for j in 0..dim {
                            d[dst + j] += g_out[r * dim + j];
                        }
                    }
                });
            }
            Op::RowDot(a, b, dim) => {
                let av = &nodes[a.0].values;
                let bv = &nodes[b.0].values;
                Tape::<E>::accumulate(grads, nodes, a, |d| {
                    for (r, &g) in g_out.iter().enumerate() {
                        for j in 0..dim {
                            d[r * dim + j] += g * bv[r * dim + j];
                        }
                    }
                });
                Tape::<E>::accumulate(grads, nodes, b, |d| {
                    for (r, &g) in g_out.iter().enumerate() {
                        for j in 0..dim {
                            d[r * dim + j] += g * av[r * dim + j];
                        }
                    }
                });
            }
            Op::SelectRows { x, rows, dim } => {
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for (i, &src) in rows.iter().enumerate() {
                        for j in 0..dim {
                            d[src * dim + j] += g_out[i * dim + j];
                        }
                    }
                });
            }
            Op::PoolBlocks {
                x,
                weights,
                blocks,
                block_rows,
                cols,
            } => {
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for b in 0..blocks {
                        for t in 0..block_rows {
                            let w = weights[b * block_rows + t];
                            if w == E::ZERO {
                                continue;
                            }
                            let dst = (b * block_rows + t) * cols;
                            for j in 0..cols {
                                d[dst + j] += w * g_out[b * cols + j];
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let g = g_out[0];
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for v in d.iter_mut() {
                        *v += g;
                    }
                });
            }
            Op::AttnScores { q, k, groups, rows, dim } => {
                let qv = &nodes[q.0].values;
                let kv = &nodes[k.0].values;
                // dQ_g += G_g @ K_g ; dK_g += G_g^T @ Q_g
                Tape::<E>::accumulate(grads, nodes, q, |d| {
                    block_par(groups, rows * dim, d, |g, out| {
                        E::gemm(
                            false,
                            false,
                            rows,
                            rows,
                            dim,
                            E::ONE,
                            &g_out[g * rows * rows..(g + 1) * rows * rows],
                            &kv[g * rows * dim..(g + 1) * rows * dim],
                            E::ONE,
                            out,
                        );
                    });
                });
                Tape::<E>::accumulate(grads, nodes, k, |d| {
                    block_par(groups, rows * dim, d, |g, out| {
                        E::gemm(
                            true,
                            false,
                            rows,
                            rows,
                            dim,
                            E::ONE,
                            &g_out[g * rows * rows..(g + 1) * rows * rows],
                            &qv[g * rows * dim..(g + 1) * rows * dim],
                            E::ONE,
                            out,
                        );
                    });
                });
            }
            Op::AttnApply { w, v, groups, rows, dim } => {
                let wv = &nodes[w.0].values;
                let vv = &nodes[v.0].values;
                // dW_g += G_g @ V_g^T ; dV_g += W_g^T @ G_g
                Tape::<E>::accumulate(grads, nodes, w, |d| {
                    block_par(groups, rows * rows, d, |g, out| {
                        E::gemm(
                            false,
                            true,
                            rows,
                            dim,
                            rows,
                            E::ONE,
                            &g_out[g * rows * dim..(g + 1) * rows * dim],
                            &vv[g * rows * dim..(g + 1) * rows * dim],
                            E::ONE,
                            out,
                        );
                    });
                });
                Tape::<E>::accumulate(grads, nodes, v, |d| {
                    block_par(groups, rows * dim, d, |g, out| {
                        E::gemm(
                            true,
                            false,
                            rows,
                            rows,
                            dim,
                            E::ONE,
                            &wv[g * rows * rows..(g + 1) * rows * rows],
                            &g_out[g * rows * dim..(g + 1) * rows * dim],
                            E::ONE,
                            out,
                        );
                    });
                });
            }
            Op::SplitHeads {
                x,
                batch,
                rows,
                heads,
                head_dim,
            } => {
                let d_model = heads * head_dim;
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for b in 0..batch {
                        for h in 0..heads {
                            for t in 0..rows {
                                let split = (((b * heads + h) * rows) + t) * head_dim;
                                let merged = ((b * rows + t) * d_model) + h * head_dim;
                                for j in 0..head_dim {
                                    d[merged + j] += g_out[split + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads {
                x,
                batch,
                rows,
                heads,
                head_dim,
            } => {
                let d_model = heads * head_dim;
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for b in 0..batch {
                        for h in 0..heads {
                            for t in 0..rows {
                                let split = (((b * heads + h) * rows) + t) * head_dim;
                                let merged = ((b * rows + t) * d_model) + h * head_dim;
                                for j in 0..head_dim {
                                    d[split + j] += g_out[merged + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::ConcatCols(a, b, ca, cb) => {
                let rows = g_out.len() / (ca + cb);
                Tape::<E>::accumulate(grads, nodes, a, |d| {
                    for i in 0..rows {
                        for j in 0..ca {
                            d[i * ca + j] += g_out[i * (ca + cb) + j];
                        }
                    }
                });
                Tape::<E>::accumulate(grads, nodes, b, |d| {
                    for i in 0..rows {
                        for j in 0..cb {
                            d[i * cb + j] += g_out[i * (ca + cb) + ca + j];
                        }
                    }
                });
            }
            Op::LogSumExpRows(x, cols) => {
                let threshold = E::from_f64(MASKED_THRESHOLD);
                let xv = &nodes[x.0].values;
                let ov = &nodes[out_values_idx].values;
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for (r, &g) in g_out.iter().enumerate() {
                        for j in 0..cols {
                            let v = xv[r * cols + j];
                            if v > threshold {
                                d[r * cols + j] += g * (v - ov[r]).exp();
                            }
                        }
                    }
                });
            }
            Op::TakeDiag(x, n) => {
                Tape::<E>::accumulate(grads, nodes, x, |d| {
                    for (r, &g) in g_out.iter().enumerate() {
                        d[r * n + r] += g;
                    }
                });
            }
        }
    }
}

fn add_into<E: Real>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-block parallel gemm. Output rows are partitioned across threads, so
/// every element is computed exactly as in the serial case.
#[allow(clippy::too_many_arguments)]
fn par_gemm<E: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    b: &[E],
    beta: E,
    c: &mut [E],
) {
    const PAR_FLOP_THRESHOLD: usize = 1 << 22;
    let threads = rayon::current_num_threads();
    if trans_a || threads < 2 || m * k * n < PAR_FLOP_THRESHOLD || m < 2 * threads {
        E::gemm(trans_a, trans_b, m, k, n, alpha, a, b, beta, c);
        return;
    }
    let chunk_rows = m.div_ceil(threads);
    c.par_chunks_mut(chunk_rows * n)
        .enumerate()
        .for_each(|(ci, c_chunk)| {
            let row0 = ci * chunk_rows;
            let rows = c_chunk.len() / n;
            let a_chunk = &a[row0 * k..row0 * k + rows * k];
            E::gemm(false, trans_b, rows, k, n, alpha, a_chunk, b, beta, c_chunk);
        });
}

/// Runs `f(g, block)` for each of `groups` equally sized output blocks,
/// in parallel when the work is large enough.
fn block_par<E: Real>(
    groups: usize,
    block_len: usize,
    out: &mut [E],
    f: impl Fn(usize, &mut [E]) + Sync,
) {
    debug_assert_eq!(out.len(), groups * block_len);
    if groups >= 2 && rayon::current_num_threads() >= 2 && groups * block_len >= (1 << 16) {
        out.par_chunks_mut(block_len)
            .enumerate()
            .for_each(|(g, chunk)| f(g, chunk));
    } else {
        for (g, chunk) in out.chunks_mut(block_len).enumerate() {
            f(g, chunk);
        }
    }
}

const LAYER_NORM_EPS: f64 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: Vec<f64>, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::new(values, shape).with_grad()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]));
        let eye = tape.leaf(&Tensor::new(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]));
        let out = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.values(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![0.0], vec![1]));
        let out = tape.sigmoid(x).unwrap();
        assert!((tape.values(out)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mean_pool_rows_direct() {
        // Oracle: ((1+5)/2, (3+7)/2) = (3, 5).
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![1.0, 3.0, 5.0, 7.0], vec![2, 2]));
        let out = tape.mean_pool_rows(x).unwrap();
        assert_eq!(tape.values(out), &[3.0, 5.0]);
    }

    #[test]
    fn softmax_equal_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![0.0, 0.0], vec![1, 2]));
        let out = tape.softmax_rows(x, None).unwrap();
        assert_eq!(tape.values(out), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        // e^0 / (e^0 + e^{ln 3}) = 1/4.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![0.0, 3.0f64.ln()], vec![1, 2]));
        let out = tape.softmax_rows(x, None).unwrap();
        let v = tape.values(out);
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_single_allowed_entry() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![5.0, 9.0], vec![1, 2]));
        let mask = Arc::new(vec![0.0, MASK_NEG_INF]);
        let out = tape.softmax_rows(x, Some(mask)).unwrap();
        assert_eq!(tape.values(out), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![5.0, 9.0], vec![1, 2]));
        let mask = Arc::new(vec![MASK_NEG_INF, MASK_NEG_INF]);
        let err = tape.softmax_rows(x, Some(mask)).unwrap_err();
        assert!(matches!(err, TensorError::FullyMaskedRow { row: 0 }));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(
            vec![3.5, -2.0, 0.1, 88.0, -55.0, 7.0, 7.0, 7.0],
            vec![2, 4],
        ));
        let out = tape.softmax_rows(x, None).unwrap();
        for row in tape.values(out).chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_constant_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![1.0, 1.0, 1.0, 1.0], vec![1, 4]));
        let gain = tape.leaf(&Tensor::filled(1.0, vec![4]));
        let bias = tape.leaf(&Tensor::zeros(vec![4]));
        let out = tape.layer_norm(x, gain, bias).unwrap();
        for &v in tape.values(out) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_standardized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![-1.0, 1.0], vec![1, 2]));
        let gain = tape.leaf(&Tensor::filled(1.0, vec![2]));
        let bias = tape.leaf(&Tensor::zeros(vec![2]));
        let out = tape.layer_norm(x, gain, bias).unwrap();
        let v = tape.values(out);
        assert!((v[0] + 1.0).abs() < 1e-5);
        assert!((v[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_zero_gain_gives_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![3.0, -7.0, 2.5], vec![1, 3]));
        let gain = tape.leaf(&Tensor::zeros(vec![3]));
        let bias = tape.leaf(&Tensor::filled(4.25, vec![3]));
        let out = tape.layer_norm(x, gain, bias).unwrap();
        for &v in tape.values(out) {
            assert!((v - 4.25).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_square_sum() {
        // loss = sum(x*x) at x=[3] -> d/dx = 2x = 6.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![3.0], vec![1]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_sigmoid_times_weight() {
        // loss = sigmoid(0) * w at w=1 -> d/dw = 0.5.
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&Tensor::new(vec![0.0], vec![1]));
        let w = tape.leaf(&t(vec![1.0], vec![1]));
        let s = tape.sigmoid(z).unwrap();
        let prod = tape.mul(s, w).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(w).unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_disconnected_leaf_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![3.0], vec![1]));
        let unused = tape.leaf(&t(vec![5.0], vec![1]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad_or_zeros(unused), vec![0.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![1.0, 2.0], vec![2]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::Usage(_)));
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![1.0, 0.0], vec![2]));
        let err = tape.log(x).unwrap_err();
        assert!(matches!(err, TensorError::Domain { op: "log", .. }));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(vec![1.0, 2.0, 3.0], vec![1, 3]));
        let b = tape.leaf(&t(vec![1.0, 2.0], vec![2, 1]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(&t(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]));
        let err = tape.gather_rows(table, Arc::new(vec![2])).unwrap_err();
        assert!(matches!(err, TensorError::Domain { .. }));
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = tape.leaf(&t(vals.clone(), vec![4, 6]));
        let split = tape.split_heads(x, 2, 2, 3).unwrap();
        let merged = tape.merge_heads(split, 2, 2, 3).unwrap();
        assert_eq!(tape.values(merged), vals.as_slice());
    }

    #[test]
    fn attn_scores_match_loop() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(&t(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], vec![4, 2]));
        let k = tape.leaf(&t(vec![0.5, 1.0, -1.0, 2.0, 0.0, 1.0, 3.0, -2.0], vec![4, 2]));
        let scores = tape.attn_scores(q, k, 2, 2).unwrap();
        let qv = tape.values(q).to_vec();
        let kv = tape.values(k).to_vec();
        let sv = tape.values(scores);
        for g in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut expect = 0.0;
                    for f in 0..2 {
                        expect += qv[(g * 2 + i) * 2 + f] * kv[(g * 2 + j) * 2 + f];
                    }
                    assert!((sv[(g * 2 + i) * 2 + j] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_finite_output_is_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::<f32>::new(vec![200.0], vec![1]).with_grad());
        let err = tape.exp(x).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "exp", .. }));
    }
}
