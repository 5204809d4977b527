use std::sync::Arc;

use forge_masks::SparseMask;

use crate::conv::{nchw_to_rows, rows_to_nchw, ConvGeometry};
use crate::{csr_matmul, kernels, CompressedRows};
use crate::{Result, Scalar, Tensor, TensorError};

/// Masked kernels use index loops below this density and a dense product on
/// zero-filled weights above it.
const SPARSE_KERNEL_DENSITY: f64 = 0.5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MaskedLinear {
        x: Var,
        w: Var,
        mask: Arc<SparseMask>,
        dense_grad: bool,
    },
    Compressed {
        x: Var,
        w: Arc<CompressedRows<T>>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    AddBias(Var, Var),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Im2Col(Var, ConvGeometry),
    RowsToNchw(Var, [usize; 3]),
    Reshape(Var),
    Depthwise {
        x: Var,
        w: Var,
        mask: Option<Arc<SparseMask>>,
        dense_grad: bool,
        geom: ConvGeometry,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the tape's leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Arena of recorded operations for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<T>(op: &'static str, left: &[usize], right: &[usize]) -> Result<T> {
    Err(TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    })
}

/// `(outer, features, inner)` for per-feature ops: dimension 1 is the
/// feature axis, everything after it is spatial.
fn feature_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return mismatch(op, shape, &[0, 0]);
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Sums `w[p, j] * src[row]` into `dst[col]` for each active `(p, j)`, where
/// rows of `src` and `dst` are contiguous runs of length `m`. Forward reads
/// row `p` and writes row `j`; `backward` swaps them.
fn scatter_columns<T: Scalar>(
    src: &[T],
    w: &[T],
    active: &[u32],
    m: usize,
    n: usize,
    len: usize,
    backward: bool,
) -> Vec<T> {
    let mut dst = vec![T::zero(); len];
    for &idx in active {
        let (p, j) = (idx as usize / n, idx as usize % n);
        let (from, to) = if backward { (j, p) } else { (p, j) };
        let v = w[idx as usize];
        let s = &src[from * m..(from + 1) * m];
        for (d, &x) in dst[to * m..(to + 1) * m].iter_mut().zip(s) {
            *d += v * x;
        }
    }
    dst
}

fn masked_copy<T: Scalar>(w: &[T], mask: &SparseMask) -> Vec<T> {
    w.iter()
        .zip(mask.bits())
        .map(|(&v, &on)| if on { v } else { T::zero() })
        .collect()
}

fn density(mask: &SparseMask) -> f64 {
    mask.active_count() as f64 / mask.len().max(1) as f64
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the per-op NaN/Inf check (on by default in debug
    /// builds).
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by weight products so far. Masked
    /// products count active weights only.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn data(&self, var: Var) -> &[T] {
        self.nodes[var.0].value.data()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return mismatch("matmul", self.shape(a), self.shape(b));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        self.macs += (m * k * n) as u64;
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// `x · (w ⊙ mask)`, plus `bias` per output feature when given.
    ///
    /// The weight gradient is zero at inactive positions unless `dense_grad`
    /// is set, in which case the full dense gradient is returned.
    pub fn masked_linear(
        &mut self,
        x: Var,
        w: Var,
        mask: &Arc<SparseMask>,
        bias: Option<Var>,
        dense_grad: bool,
    ) -> Result<Var> {
        let (m, k) = self.value(x).dims2("masked_linear")?;
        let (k2, n) = self.value(w).dims2("masked_linear")?;
        if k != k2 {
            return mismatch("masked_linear", self.shape(x), self.shape(w));
        }
        if mask.len() != k * n {
            return mismatch("masked_linear", self.shape(w), mask.shape());
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let out = if density(mask) >= SPARSE_KERNEL_DENSITY {
            kernels::matmul(xd, &masked_copy(wd, mask), m, k, n)
        } else {
            let xt = kernels::transpose(xd, m, k);
            let out_t = scatter_columns(&xt, wd, mask.active(), m, n, n * m, false);
            kernels::transpose(&out_t, n, m)
        };
        self.macs += (m * mask.active_count()) as u64;
        let rg = self.needs(x) || self.needs(w);
        let op = Op::MaskedLinear {
            x,
            w,
            mask: Arc::clone(mask),
            dense_grad,
        };
        let y = self.push(Tensor::new(&[m, n], out)?, op, rg, "masked_linear")?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// `x · w` over the stored entries of a fixed compressed weight. The
    /// weight receives no gradient.
    pub fn compressed_linear(&mut self, x: Var, w: &Arc<CompressedRows<T>>) -> Result<Var> {
        let (out, macs) = csr_matmul(self.value(x), w)?;
        self.macs += macs;
        let rg = self.needs(x);
        self.push(
            out,
            Op::Compressed {
                x,
                w: Arc::clone(w),
            },
            rg,
            "compressed_linear",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return mismatch(name, self.shape(a), self.shape(b));
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(value, op, rg, name)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = Tensor::new(self.shape(a), self.data(a).iter().map(|&v| v * c).collect())?;
        let rg = self.needs(a);
        self.push(value, Op::Scale(a, c), rg, "scale")
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.data(a).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.needs(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg, "sum")
    }

    /// Adds `b[f]` to every element of feature `f` (dimension 1).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (outer, features, inner) = feature_layout(self.shape(x), "add_bias")?;
        if self.shape(b) != [features] {
            return mismatch("add_bias", self.shape(x), self.shape(b));
        }
        let bd = self.data(b);
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for (f, &bv) in bd.iter().enumerate() {
                let base = (o * features + f) * inner;
                for v in &mut out[base..base + inner] {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.needs(x) || self.needs(b);
        self.push(value, Op::AddBias(x, b), rg, "add_bias")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.needs(x);
        self.push(value, Op::Relu(x), rg, "relu")
    }

    /// Per-feature normalization over batch and spatial positions. Train
    /// mode normalizes with the biased batch variance and folds the unbiased
    /// variance into the running statistics; eval mode uses the running
    /// statistics only.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        eps: f64,
        momentum: f64,
        mode: Mode,
    ) -> Result<Var> {
        let (outer, features, inner) = feature_layout(self.shape(x), "batchnorm")?;
        if self.shape(gamma) != [features]
            || self.shape(beta) != [features]
            || stats.features() != features
        {
            return mismatch("batchnorm", self.shape(x), self.shape(gamma));
        }
        let train = mode == Mode::Train;
        if train && outer < 2 {
            return Err(TensorError::BatchTooSmall(outer));
        }
        let xd = self.data(x);
        let count = outer * inner;
        let n = T::from_f64(count as f64);
        let eps = T::from_f64(eps);
        let (mean, var) = if train {
            let mut mean = vec![T::zero(); features];
            let mut var = vec![T::zero(); features];
            if inner == 1 {
                for row in xd.chunks_exact(features) {
                    mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
                }
            } else {
                for (o, chunk) in xd.chunks_exact(inner).enumerate() {
                    mean[o % features] += chunk.iter().copied().fold(T::zero(), |a, v| a + v);
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            if inner == 1 {
                for row in xd.chunks_exact(features) {
                    for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(row) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
            } else {
                for o in 0..outer {
                    for f in 0..features {
                        let base = (o * features + f) * inner;
                        for &v in &xd[base..base + inner] {
                            let d = v - mean[f];
                            var[f] += d * d;
                        }
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            (mean, var)
        } else {
            (stats.running_mean.clone(), stats.running_var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        if inner == 1 {
            let rows = xd
                .chunks_exact(features)
                .zip(xhat.chunks_exact_mut(features))
                .zip(out.chunks_exact_mut(features));
            for ((row, hrow), orow) in rows {
                for f in 0..features {
                    hrow[f] = (row[f] - mean[f]) * inv_std[f];
                    orow[f] = gd[f] * hrow[f] + bd[f];
                }
            }
        } else {
            for o in 0..outer {
                for f in 0..features {
                    let base = (o * features + f) * inner;
                    for i in base..base + inner {
                        xhat[i] = (xd[i] - mean[f]) * inv_std[f];
                        out[i] = gd[f] * xhat[i] + bd[f];
                    }
                }
            }
        }
        if train {
            let mom = T::from_f64(momentum);
            let unbias = T::from_f64(count as f64 / (count.max(2) - 1) as f64);
            for f in 0..features {
                stats.running_mean[f] = (T::one() - mom) * stats.running_mean[f] + mom * mean[f];
                stats.running_var[f] =
                    (T::one() - mom) * stats.running_var[f] + mom * var[f] * unbias;
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        self.push(value, op, rg, "batchnorm")
    }

    /// Lowers NCHW input to its patch matrix `[B·oh·ow, C·kh·kw]`.
    pub fn im2col(
        &mut self,
        x: Var,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<(Var, ConvGeometry)> {
        let geom = ConvGeometry::new(self.shape(x), kernel, stride, padding)?;
        let out = geom.im2col(self.data(x));
        let value = Tensor::new(&[geom.patch_rows(), geom.patch_cols()], out)?;
        let rg = self.needs(x);
        Ok((self.push(value, Op::Im2Col(x, geom), rg, "im2col")?, geom))
    }

    /// `[B·h·w, C]` rows back to NCHW.
    pub fn rows_to_nchw(&mut self, x: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        let (rows, c) = self.value(x).dims2("rows_to_nchw")?;
        if rows != batch * h * w {
            return mismatch("rows_to_nchw", self.shape(x), &[batch, c, h, w]);
        }
        let out = rows_to_nchw(self.data(x), batch, c, h * w);
        let value = Tensor::new(&[batch, c, h, w], out)?;
        let rg = self.needs(x);
        self.push(
            value,
            Op::RowsToNchw(x, [batch, c, h * w]),
            rg,
            "rows_to_nchw",
        )
    }

    /// Convolution as patch matrix times a `[C·kh·kw, C_out]` weight, masked
    /// when `mask` is given.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        mask: Option<&Arc<SparseMask>>,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        dense_grad: bool,
    ) -> Result<Var> {
        let (patches, geom) = self.im2col(x, kernel, stride, padding)?;
        let rows = match mask {
            Some(mask) => self.masked_linear(patches, w, mask, None, dense_grad)?,
            None => self.matmul(patches, w)?,
        };
        self.rows_to_nchw(rows, geom.batch, geom.out_h, geom.out_w)
    }

    /// Depthwise convolution with weight `[kh·kw, C_out]`, `C_out` a multiple
    /// of the input channels. Output channel `o` reads input channel
    /// `o / (C_out / C_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        mask: Option<&Arc<SparseMask>>,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        dense_grad: bool,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), kernel, stride, padding)?;
        let (area, c_out) = self.value(w).dims2("depthwise_conv2d")?;
        if area != geom.kernel_area() || geom.channels == 0 || c_out % geom.channels != 0 {
            return mismatch("depthwise_conv2d", self.shape(x), self.shape(w));
        }
        if mask.is_some_and(|m| m.len() != area * c_out) {
            return mismatch(
                "depthwise_conv2d",
                self.shape(w),
                mask.map_or(&[][..], |m| m.shape()),
            );
        }
        let wm = match mask {
            Some(m) => masked_copy(self.data(w), m),
            None => self.data(w).to_vec(),
        };
        let xd = self.data(x);
        let mut out = vec![T::zero(); geom.batch * c_out * geom.out_h * geom.out_w];
        geom.for_each_depthwise_tap(c_out, |o_idx, k, o, i_idx| {
            out[o_idx] += xd[i_idx] * wm[k * c_out + o];
        });
        let active = mask.map_or(area * c_out, |m| m.active_count());
        self.macs += (geom.batch * geom.out_h * geom.out_w * active) as u64;
        let value = Tensor::new(&[geom.batch, c_out, geom.out_h, geom.out_w], out)?;
        let rg = self.needs(x) || self.needs(w);
        let op = Op::Depthwise {
            x,
            w,
            mask: mask.cloned(),
            dense_grad,
            geom,
        };
        self.push(value, op, rg, "depthwise_conv2d")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(x);
        self.push(value, Op::Reshape(x), rg, "reshape")
    }

    /// `[B, ...]` to `[B, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let b = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product();
        self.reshape(x, &[b, rest])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != b {
            return mismatch("softmax_cross_entropy", self.shape(logits), &[labels.len()]);
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label, classes: c });
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &ld[i * c..(i + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut z = T::zero();
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= z);
            loss += z.ln() - (row[label] - max);
        }
        loss /= T::from_f64(b as f64);
        let rg = self.needs(logits);
        let op = Op::SoftmaxCe {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        self.push(Tensor::scalar(loss), op, rg, "softmax_cross_entropy")
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return mismatch("mse", self.shape(pred), target.shape());
        }
        let n = T::from_f64(target.len().max(1) as f64);
        let sum = self
            .data(pred)
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
        let rg = self.needs(pred);
        let op = Op::Mse {
            pred,
            target: target.data().to_vec(),
        };
        self.push(Tensor::scalar(sum / n), op, rg, "mse")
    }

    /// Reverse pass from a one-element `loss`. Gradients are kept for leaves
    /// only.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(&node.op, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Tensor::new(node.value.shape(), g).ok()
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, g: Vec<T>) {
        if !self.needs(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    self.accumulate(grads, *a, kernels::matmul_nt(g, self.data(*b), m, n, k));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(self.data(*a), g, m, k, n));
                }
            }
            Op::MaskedLinear {
                x,
                w,
                mask,
                dense_grad,
            } => {
                let (m, k) = self.value(*x).dims2("masked_linear")?;
                let n = self.shape(*w)[1];
                let (xd, wd) = (self.data(*x), self.data(*w));
                let sparse = density(mask) < SPARSE_KERNEL_DENSITY;
                if self.needs(*x) {
                    let dx = if sparse {
                        let gt = kernels::transpose(g, m, n);
                        let dx_t = scatter_columns(&gt, wd, mask.active(), m, n, k * m, true);
                        kernels::transpose(&dx_t, k, m)
                    } else {
                        kernels::matmul_nt(g, &masked_copy(wd, mask), m, n, k)
                    };
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let dw = if *dense_grad {
                        kernels::matmul_tn(xd, g, m, k, n)
                    } else if sparse {
                        let xt = kernels::transpose(xd, m, k);
                        let gt = kernels::transpose(g, m, n);
                        let vals = kernels::sampled_tn(&xt, &gt, m, n, mask.active());
                        let mut dw = vec![T::zero(); k * n];
                        for (&idx, v) in mask.active().iter().zip(vals) {
                            dw[idx as usize] = v;
                        }
                        dw
                    } else {
                        masked_copy(&kernels::matmul_tn(xd, g, m, k, n), mask)
                    };
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Compressed { x, w } => {
                let (m, k) = self.value(*x).dims2("compressed_linear")?;
                let n = w.cols();
                let (offsets, indices, values) = (w.offsets(), w.indices(), w.values());
                let mut dx = vec![T::zero(); m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let mut acc = T::zero();
                        for e in offsets[p]..offsets[p + 1] {
                            acc += grow[indices[e] as usize] * values[e];
                        }
                        dx[i * k + p] = acc;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, g.iter().zip(bd).map(|(&g, &v)| g * v).collect());
                self.accumulate(grads, *b, g.iter().zip(ad).map(|(&g, &v)| g * v).collect());
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|&v| v * *c).collect()),
            Op::Sum(a) => self.accumulate(grads, *a, vec![g[0]; self.value(*a).len()]),
            Op::AddBias(x, b) => {
                let (outer, features, inner) = feature_layout(self.shape(*x), "add_bias")?;
                if self.needs(*b) {
                    let mut db = vec![T::zero(); features];
                    for o in 0..outer {
                        for (f, acc) in db.iter_mut().enumerate() {
                            let base = (o * features + f) * inner;
                            for &v in &g[base..base + inner] {
                                *acc += v;
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (outer, features, inner) = feature_layout(self.shape(*x), "batchnorm")?;
                let gd = self.data(*gamma);
                let mut dgamma = vec![T::zero(); features];
                let mut dbeta = vec![T::zero(); features];
                for o in 0..outer {
                    for f in 0..features {
                        let base = (o * features + f) * inner;
                        for i in base..base + inner {
                            dgamma[f] += g[i] * xhat[i];
                            dbeta[f] += g[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let n = T::from_f64((outer * inner) as f64);
                    for o in 0..outer {
                        for f in 0..features {
                            let base = (o * features + f) * inner;
                            for i in base..base + inner {
                                dx[i] = if *train {
                                    // dgamma = Σ g·xhat, dbeta = Σ g, both per feature
                                    gd[f]
                                        * inv_std[f]
                                        * (g[i] - dbeta[f] / n - xhat[i] * dgamma[f] / n)
                                } else {
                                    gd[f] * inv_std[f] * g[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Im2Col(x, geom) => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, geom.col2im(g));
                }
            }
            Op::RowsToNchw(x, [b, c, hw]) => {
                self.accumulate(grads, *x, nchw_to_rows(g, *b, *c, *hw))
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Depthwise {
                x,
                w,
                mask,
                dense_grad,
                geom,
            } => {
                let c_out = self.shape(*w)[1];
                let (xd, wd) = (self.data(*x), self.data(*w));
                let wm = match mask {
                    Some(m) => masked_copy(wd, m),
                    None => wd.to_vec(),
                };
                let mut dx = vec![T::zero(); xd.len()];
                let mut dw = vec![T::zero(); wd.len()];
                geom.for_each_depthwise_tap(c_out, |o_idx, k, o, i_idx| {
                    dx[i_idx] += g[o_idx] * wm[k * c_out + o];
                    dw[k * c_out + o] += g[o_idx] * xd[i_idx];
                });
                if let (Some(m), false) = (mask, dense_grad) {
                    dw = masked_copy(&dw, m);
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / T::from_f64(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &label) in labels.iter().enumerate() {
                    d[i * c + label] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Mse { pred, target } => {
                let scale = g[0] * T::from_f64(2.0 / target.len().max(1) as f64);
                let d = self
                    .data(*pred)
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| (p - t) * scale)
                    .collect();
                self.accumulate(grads, *pred, d);
            }
        }
        Ok(())
    }
}
