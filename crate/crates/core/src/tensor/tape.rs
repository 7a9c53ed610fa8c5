use super::kernels::{self, gemm};
use super::{Real, Tensor};
use crate::error::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        groups: usize,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Sub {
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Affine {
        x: Var,
        alpha: T,
    },
    Logistic {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    NormalizeRows {
        x: Var,
        sums: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MeanRows {
        x: Var,
        groups: usize,
    },
    MeanCols {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    TileRows {
        x: Var,
        times: usize,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        reduction: Reduction,
    },
    Mse {
        a: Var,
        b: Var,
        reduction: Reduction,
    },
    GradReverse {
        x: Var,
        lambda: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "multiply",
            Op::Affine { .. } => "scale",
            Op::Logistic { .. } => "logistic",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanRows { .. } | Op::MeanCols { .. } => "mean_axis",
            Op::Sum { .. } => "sum",
            Op::Reshape { .. } => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::TileRows { .. } => "tile_rows",
            Op::GatherRows { .. } => "embedding_lookup",
            Op::CrossEntropy { .. } => "cross_entropy_logits",
            Op::Mse { .. } => "mse",
            Op::GradReverse { .. } => "grad_reverse",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// Every operation appends one node; [`Tape::backward`] replays the record in
/// reverse. The tape is not consumed, so repeated backward passes are
/// possible and yield identical gradients.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn wrt(&self, var: Var, len: usize) -> Vec<T> {
        self.get(var).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast, TensorError> {
    let b_numel: usize = b.iter().product();
    if a == b {
        Ok(Broadcast::Same)
    } else if b_numel == 1 {
        Ok(Broadcast::Scalar)
    } else if b_numel == *a.last().unwrap_or(&0) && b.len() <= 2 && (b.len() == 1 || b[0] == 1) {
        Ok(Broadcast::Row)
    } else {
        Err(TensorError::shape(op, a, b))
    }
}

#[inline]
fn bidx(bcast: Broadcast, i: usize, cols: usize) -> usize {
    match bcast {
        Broadcast::Same => i,
        Broadcast::Row => i % cols,
        Broadcast::Scalar => 0,
    }
}

fn reduce_to<T: Real>(bcast: Broadcast, g: &[T], cols: usize) -> Vec<T> {
    match bcast {
        Broadcast::Same => g.to_vec(),
        Broadcast::Scalar => vec![g.iter().copied().sum()],
        Broadcast::Row => {
            let mut out = vec![T::zero(); cols];
            for row in g.chunks(cols) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], var: Var, contribution: Vec<T>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// A tape that reports the first op producing NaN or infinity.
    pub fn with_finite_checks() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var, TensorError> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let mut value = value;
        value.requires_grad = requires_grad;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg).expect("leaf values are never rejected")
    }

    /// Records a trainable copy of `tensor`.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        self.leaf(tensor.clone().with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn dims2(&self, op: &'static str, x: Var) -> Result<(usize, usize), TensorError> {
        let s = self.shape(x);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(TensorError::invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `a [m×k] · b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.group_matmul(a, b, 1, false)
    }

    /// Block-diagonal product over `groups` stacked matrices.
    ///
    /// `a` is `[groups·m × k]`. Without `trans_b`, `b` is `[groups·k × n]` and
    /// each block computes `a_g · b_g`; with `trans_b`, `b` is `[groups·n × k]`
    /// and each block computes `a_g · b_gᵀ`.
    pub fn group_matmul(&mut self, a: Var, b: Var, groups: usize, trans_b: bool) -> Result<Var, TensorError> {
        let (ar, k) = self.dims2("matmul", a)?;
        let (br, bc) = self.dims2("matmul", b)?;
        let err = || TensorError::shape("matmul", self.shape(a), self.shape(b));
        if groups == 0 || ar % groups != 0 || br % groups != 0 {
            return Err(err());
        }
        let m = ar / groups;
        let n = if trans_b {
            if bc != k {
                return Err(err());
            }
            br / groups
        } else {
            if br / groups != k {
                return Err(err());
            }
            bc
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); groups * m * n];
        for g in 0..groups {
            gemm(
                m,
                k,
                n,
                &av[g * m * k..(g + 1) * m * k],
                false,
                &bv[g * k * n..(g + 1) * k * n],
                trans_b,
                &mut out[g * m * n..(g + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![groups * m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        self.push(
            value,
            Op::Matmul {
                a,
                b,
                groups,
                trans_b,
                m,
                k,
                n,
            },
            rg,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2("transpose", x)?;
        let data = kernels::transpose(r, c, self.value(x).data());
        let value = Tensor::new(vec![c, r], data)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Transpose { x }, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Broadcast), TensorError> {
        let bcast = broadcast_kind(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[bidx(bcast, i, cols)]))
            .collect();
        Ok((Tensor::new(av.shape().to_vec(), data)?, bcast))
    }

    /// Elementwise sum. `b` may match `a`, be a row vector over `a`'s last
    /// axis, or a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, bcast) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add { a, b, bcast }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, bcast) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Sub { a, b, bcast }, rg)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, bcast) = self.binary("multiply", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Mul { a, b, bcast }, rg)
    }

    /// `alpha · x + beta`.
    pub fn affine(&mut self, x: Var, alpha: T, beta: T) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| alpha * v + beta).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Affine { x, alpha }, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        self.affine(x, c, T::zero())
    }

    pub fn logistic(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kernels::logistic(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Logistic { x }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu { x }, rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = vec![T::zero(); xv.numel()];
        for (row, out) in xv.data().chunks(cols).zip(data.chunks_mut(cols)) {
            kernels::softmax_row(row, out);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Softmax { x }, rg)
    }

    /// Divides each row by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let cols = xv.cols();
        let sums: Vec<T> = xv.data().chunks(cols).map(|r| r.iter().copied().sum()).collect();
        if sums.iter().any(|s| *s == T::zero()) {
            return Err(TensorError::invalid("normalize_rows", "row sums to zero"));
        }
        let data = xv.data().iter().enumerate().map(|(i, &v)| v / sums[i / cols]).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::NormalizeRows { x, sums }, rg)
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-column gain `gamma` and shift `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(TensorError::shape("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let n = T::lit(cols as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut data = vec![T::zero(); xv.numel()];
        for (r, row) in xv.data().chunks(cols).enumerate() {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::lit(eps)).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                data[r * cols + c] = h * g[c] + bta[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean over rows within each of `groups` equal row blocks:
    /// `[groups·r × c] → [groups × c]`.
    pub fn mean_rows(&mut self, x: Var, groups: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.dims2("mean_axis", x)?;
        if groups == 0 || rows % groups != 0 {
            return Err(TensorError::invalid(
                "mean_axis",
                format!("{rows} rows do not split into {groups} groups"),
            ));
        }
        let per = rows / groups;
        let inv = T::one() / T::lit(per as f64);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); groups * cols];
        for g in 0..groups {
            let out = &mut data[g * cols..(g + 1) * cols];
            for r in 0..per {
                let row = &xv[(g * per + r) * cols..(g * per + r + 1) * cols];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let value = Tensor::new(vec![groups, cols], data)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::MeanRows { x, groups }, rg)
    }

    /// Mean of a matrix along `axis` (0: over rows, giving `[c]`; 1: over
    /// columns, giving `[r]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        match axis {
            0 => {
                let m = self.mean_rows(x, 1)?;
                let c = self.shape(m)[1];
                self.reshape(m, &[c])
            }
            1 => {
                let (_, cols) = self.dims2("mean_axis", x)?;
                let xv = self.value(x);
                let inv = T::one() / T::lit(cols as f64);
                let data = xv
                    .data()
                    .chunks(cols)
                    .map(|r| r.iter().copied().sum::<T>() * inv)
                    .collect();
                let value = Tensor::new(vec![xv.rows()], data)?;
                let rg = self.any_grad(&[x]);
                self.push(value, Op::MeanCols { x }, rg)
            }
            _ => Err(TensorError::invalid("mean_axis", format!("axis {axis} out of range"))),
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > cols {
            return Err(TensorError::invalid(
                "slice_cols",
                format!("columns {start}..{} of {cols}", start + len),
            ));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat_cols", "no inputs"))?;
        let (rows, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(TensorError::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.any_grad(parts);
        self.push(value, Op::ConcatCols { parts: parts.to_vec() }, rg)
    }

    /// Stacks `times` copies of a matrix vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.dims2("tile_rows", x)?;
        if times == 0 {
            return Err(TensorError::invalid("tile_rows", "zero copies"));
        }
        let xv = self.value(x).data();
        let data = xv.iter().copied().cycle().take(times * xv.len()).collect();
        let value = Tensor::new(vec![times * rows, cols], data)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::TileRows { x, times }, rg)
    }

    /// Embedding lookup: gathers `table` rows by index.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let (rows, cols) = self.dims2("embedding_lookup", table)?;
        if indices.is_empty() {
            return Err(TensorError::invalid("embedding_lookup", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::invalid(
                "embedding_lookup",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        let rg = self.any_grad(&[table]);
        self.push(
            value,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Softmax cross-entropy of each logit row against its class index.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var, TensorError> {
        let (rows, cols) = self.dims2("cross_entropy_logits", logits)?;
        if targets.len() != rows {
            return Err(TensorError::shape(
                "cross_entropy_logits",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(TensorError::invalid(
                "cross_entropy_logits",
                format!("class index {bad} out of range for {cols} classes"),
            ));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for (r, (row, out)) in lv.chunks(cols).zip(probs.chunks_mut(cols)).enumerate() {
            kernels::softmax_row(row, out);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[targets[r]];
        }
        if reduction == Reduction::Mean {
            total /= T::lit(rows as f64);
        }
        let rg = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                reduction,
            },
            rg,
        )
    }

    /// Squared error between two equally shaped tensors, averaged or summed.
    pub fn mse(&mut self, a: Var, b: Var, reduction: Reduction) -> Result<Var, TensorError> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(TensorError::shape("mse", self.shape(a), self.shape(b)));
        }
        let mut total: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        if reduction == Reduction::Mean {
            total /= T::lit(self.value(a).numel() as f64);
        }
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(total), Op::Mse { a, b, reduction }, rg)
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda` on the
    /// way back.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var, TensorError> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(TensorError::invalid(
                "grad_reverse",
                format!("lambda must be finite and non-negative, got {lambda}"),
            ));
        }
        let value = self.value(x).clone();
        let rg = self.any_grad(&[x]);
        self.push(
            value,
            Op::GradReverse {
                x,
                lambda: T::lit(lambda),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar output seeded with 1.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, TensorError> {
        let numel = self.value(output).numel();
        if numel != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("output must be scalar, has {numel} elements"),
            ));
        }
        self.backward_seeded(output, vec![T::one()])
    }

    /// Reverse sweep with an explicit output gradient.
    pub fn backward_seeded(&self, output: Var, seed: Vec<T>) -> Result<Gradients<T>, TensorError> {
        if seed.len() != self.value(output).numel() {
            return Err(TensorError::shape("backward", self.shape(output), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul {
                a,
                b,
                groups,
                trans_b,
                m,
                k,
                n,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if wants(a) {
                    let mut da = vec![T::zero(); av.len()];
                    for gi in 0..groups {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &bv[gi * k * n..(gi + 1) * k * n];
                        let out = &mut da[gi * m * k..(gi + 1) * m * k];
                        // dA = dC·Bᵀ, or dC·B when the forward used Bᵀ.
                        gemm(m, n, k, gg, false, bb, !trans_b, out);
                    }
                    accumulate(grads, a, da);
                }
                if wants(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for gi in 0..groups {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let aa = &av[gi * m * k..(gi + 1) * m * k];
                        let out = &mut db[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            // dB [n×k] = dCᵀ·A
                            gemm(n, m, k, gg, true, aa, false, out);
                        } else {
                            // dB [k×n] = Aᵀ·dC
                            gemm(k, m, n, aa, true, gg, false, out);
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Transpose { x } => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                accumulate(grads, x, kernels::transpose(r, c, g));
            }
            &Op::Add { a, b, bcast } | &Op::Sub { a, b, bcast } => {
                let negate = matches!(node.op, Op::Sub { .. });
                if wants(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if wants(b) {
                    let mut gb = reduce_to(bcast, g, node.value.cols());
                    if negate {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(grads, b, gb);
                }
            }
            &Op::Mul { a, b, bcast } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let cols = node.value.cols();
                if wants(a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * bv[bidx(bcast, i, cols)])
                        .collect();
                    accumulate(grads, a, ga);
                }
                if wants(b) {
                    let prod: Vec<T> = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                    accumulate(grads, b, reduce_to(bcast, &prod, cols));
                }
            }
            &Op::Affine { x, alpha } => {
                accumulate(grads, x, g.iter().map(|&v| v * alpha).collect());
            }
            &Op::Logistic { x } => {
                let y = node.value.data();
                let gx = g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect();
                accumulate(grads, x, gx);
            }
            &Op::Gelu { x } => {
                let xv = self.value(x).data();
                let gx = g.iter().zip(xv).map(|(&gi, &xi)| gi * kernels::gelu_grad(xi)).collect();
                accumulate(grads, x, gx);
            }
            &Op::Softmax { x } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), out) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(grads, x, gx);
            }
            Op::NormalizeRows { x, sums } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut gx = vec![T::zero(); y.len()];
                for (r, ((yr, gr), out)) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)).enumerate() {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (o, &gi) in out.iter_mut().zip(gr) {
                        *o = (gi - dot) / sums[r];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = node.value.cols();
                let gm = self.value(*gamma).data();
                let n = T::lit(cols as f64);
                if wants(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..cols {
                            let d = gr[c] * gm[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        for c in 0..cols {
                            let d = gr[c] * gm[c];
                            gx[r * cols + c] = inv_std[r] * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if wants(*gamma) {
                    let prod: Vec<T> = g.iter().zip(xhat).map(|(&a, &b)| a * b).collect();
                    accumulate(grads, *gamma, reduce_to(Broadcast::Row, &prod, cols));
                }
                if wants(*beta) {
                    accumulate(grads, *beta, reduce_to(Broadcast::Row, g, cols));
                }
            }
            &Op::MeanRows { x, groups } => {
                let xs = self.value(x);
                let cols = xs.cols();
                let per = xs.rows() / groups;
                let inv = T::one() / T::lit(per as f64);
                let mut gx = vec![T::zero(); xs.numel()];
                for (r, out) in gx.chunks_mut(cols).enumerate() {
                    let src = &g[(r / per) * cols..(r / per + 1) * cols];
                    for (o, &v) in out.iter_mut().zip(src) {
                        *o = v * inv;
                    }
                }
                accumulate(grads, x, gx);
            }
            &Op::MeanCols { x } => {
                let xs = self.value(x);
                let cols = xs.cols();
                let inv = T::one() / T::lit(cols as f64);
                let gx = (0..xs.numel()).map(|i| g[i / cols] * inv).collect();
                accumulate(grads, x, gx);
            }
            &Op::Sum { x } => {
                accumulate(grads, x, vec![g[0]; self.value(x).numel()]);
            }
            &Op::Reshape { x } => accumulate(grads, x, g.to_vec()),
            &Op::SliceCols { x, start } => {
                let xs = self.value(x);
                let cols = xs.cols();
                let len = node.value.cols();
                let mut gx = vec![T::zero(); xs.numel()];
                for (r, gr) in g.chunks(len).enumerate() {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(gr);
                }
                accumulate(grads, x, gx);
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if wants(p) {
                        let gp = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            &Op::TileRows { x, times } => {
                let len = self.value(x).numel();
                let mut gx = vec![T::zero(); len];
                for t in 0..times {
                    for (o, &v) in gx.iter_mut().zip(&g[t * len..(t + 1) * len]) {
                        *o += v;
                    }
                }
                accumulate(grads, x, gx);
            }
            Op::GatherRows { table, indices } => {
                let tv = self.value(*table);
                let cols = tv.cols();
                let mut gt = vec![T::zero(); tv.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        gt[i * cols + c] += g[r * cols + c];
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                reduction,
            } => {
                let cols = self.value(*logits).cols();
                let scale = match reduction {
                    Reduction::Mean => g[0] / T::lit(targets.len() as f64),
                    Reduction::Sum => g[0],
                };
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * cols + t] -= scale;
                }
                accumulate(grads, *logits, gl);
            }
            &Op::Mse { a, b, reduction } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let two = T::lit(2.0);
                let scale = match reduction {
                    Reduction::Mean => g[0] * two / T::lit(av.len() as f64),
                    Reduction::Sum => g[0] * two,
                };
                let diff: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| (x - y) * scale).collect();
                if wants(b) {
                    accumulate(grads, b, diff.iter().map(|&d| -d).collect());
                }
                if wants(a) {
                    accumulate(grads, a, diff);
                }
            }
            &Op::GradReverse { x, lambda } => {
                accumulate(grads, x, g.iter().map(|&v| -(lambda * v)).collect());
            }
        }
    }
}
