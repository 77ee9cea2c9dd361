//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! evaluation order. [`Tape::backward`] walks the record in reverse and
//! accumulates gradients for every registered parameter. The operation set is
//! deliberately small: it covers the kernel generators, the Gaussian mask,
//! convolution, normalization and the losses used for training.

use std::collections::BTreeMap;

use crate::error::{ensure, Result};
use crate::numerics::conv::{self, ConvGeometry};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a convolution's forward pass is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvMode {
    #[default]
    Direct,
    Fft,
}

/// Parameter name → gradient, ordered by name.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Sin(Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    Softplus(Var),
    Recip(Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    MaxAll {
        x: Var,
        arg: usize,
    },
    MaxLast {
        x: Var,
        args: Vec<usize>,
    },
    Crop {
        x: Var,
        starts: Vec<usize>,
    },
    Conv {
        x: Var,
        k: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MeanSpatial(Var),
    SoftmaxXent {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sin(_) => "sin",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Recip(_) => "recip",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Linear { .. } => "linear",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::MaxAll { .. } => "max",
            Op::MaxLast { .. } => "max_last",
            Op::Crop { .. } => "crop",
            Op::Conv { .. } => "conv",
            Op::BatchNorm { .. } => "batch_norm",
            Op::MeanSpatial(_) => "mean_spatial",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Single-owner operation record.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    grads: Gradients<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv<T: Scalar>(y: T) -> T {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            grads: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Registers a named trainable leaf; its gradient appears under `name`.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Var {
        let name = name.into();
        let v = self.push(t, Op::Param(name.clone()));
        self.params.push((name, v));
        v
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let v = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(v, op))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(a).map(f);
        self.push(v, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Maximum(a, b), |x, y| if x >= y { x } else { y })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), |x| x.sin())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| T::one() / x)
    }

    /// Last-axis broadcast: `out[.., j] = x[.., j] + v[j]`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        let n = self.row_len(x, v, "add_row")?;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + vv.data()[i % n])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, v)))
    }

    /// Last-axis broadcast: `out[.., j] = x[.., j] · v[j]`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        let n = self.row_len(x, v, "mul_row")?;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a * vv.data()[i % n])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulRow(x, v)))
    }

    fn row_len(&self, x: Var, v: Var, op: &str) -> Result<usize> {
        let (xs, vs) = (self.shape(x), self.shape(v));
        ensure!(
            vs.len() == 1 && xs.last() == Some(&vs[0]),
            "{op}: cannot broadcast {:?} over {:?}",
            vs,
            xs
        );
        Ok(vs[0])
    }

    /// `x · wᵀ + b` for `x: [m, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        ensure!(
            xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1],
            "linear: incompatible shapes x{:?} w{:?}",
            xs,
            ws
        );
        let (m, k, n) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bs = self.shape(b);
            ensure!(bs == [n], "linear: bias shape {:?}, expected [{n}]", bs);
            let bv = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(x).data(),
            k as isize,
            1,
            self.value(w).data(),
            1,
            k as isize,
            T::one(),
            &mut out,
            n as isize,
            1,
        );
        let out = Tensor::new([m, n], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::lit(t.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Largest element; the gradient flows to its first occurrence.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        ensure!(!t.is_empty(), "max of empty tensor");
        let (arg, m) = argmax(t.data());
        Ok(self.push(Tensor::scalar(m), Op::MaxAll { x, arg }))
    }

    /// Maximum along the last axis.
    pub fn max_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        ensure!(
            !shape.is_empty() && shape[shape.len() - 1] > 0,
            "max_last on shape {:?}",
            shape
        );
        let n = shape[shape.len() - 1];
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let (args, vals): (Vec<usize>, Vec<T>) = t.data().chunks(n).map(argmax).unzip();
        let out = Tensor::new(out_shape, vals)?;
        Ok(self.push(out, Op::MaxLast { x, args }))
    }

    /// Crops the trailing `extents.len()` axes to `starts[i]..starts[i] + extents[i]`.
    pub fn crop(&mut self, x: Var, starts: &[usize], extents: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        ensure!(
            starts.len() == extents.len() && starts.len() <= shape.len(),
            "crop: rank mismatch"
        );
        let lead = shape.len() - starts.len();
        for (i, (&s, &e)) in starts.iter().zip(extents).enumerate() {
            ensure!(
                e >= 1 && s + e <= shape[lead + i],
                "crop: window {s}+{e} outside axis of length {}",
                shape[lead + i]
            );
        }
        let mut out_shape = shape[..lead].to_vec();
        out_shape.extend_from_slice(extents);
        let mut full_starts = vec![0; lead];
        full_starts.extend_from_slice(starts);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for_each_window_offset(&shape, &out_shape, &full_starts, |off| out.push(t.data()[off]));
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, Op::Crop { x, starts: full_starts }))
    }

    /// Batched multi-channel cross-correlation.
    ///
    /// `x` is `[B, C, W]` or `[B, C, H, W]` and `k` is `[O, C, kw]` or
    /// `[O, C, kh, kw]`; `pad` holds `(before, after)` per spatial axis.
    pub fn conv(&mut self, x: Var, k: Var, pad: &[(usize, usize)], mode: ConvMode) -> Result<Var> {
        let geom = self.conv_geometry(x, k, pad)?;
        let out = match mode {
            ConvMode::Direct => conv::correlate_direct(&geom, self.value(x).data(), self.value(k).data())?,
            ConvMode::Fft => conv::correlate_fft(&geom, self.value(x).data(), self.value(k).data())?,
        };
        let [ho, wo] = geom.output();
        let shape = if self.shape(x).len() == 3 {
            vec![geom.batch, geom.out_channels, wo]
        } else {
            vec![geom.batch, geom.out_channels, ho, wo]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Conv { x, k, geom }))
    }

    fn conv_geometry(&self, x: Var, k: Var, pad: &[(usize, usize)]) -> Result<ConvGeometry> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        ensure!(
            (xs.len() == 3 || xs.len() == 4) && ks.len() == xs.len(),
            "conv: expected [B,C,...] input and [O,C,...] kernel, got {:?} and {:?}",
            xs,
            ks
        );
        ensure!(
            xs[1] == ks[1],
            "conv: input has {} channels, kernel expects {}",
            xs[1],
            ks[1]
        );
        ensure!(pad.len() == xs.len() - 2, "conv: need one padding pair per spatial axis");
        let geom = if xs.len() == 3 {
            ConvGeometry {
                batch: xs[0],
                in_channels: xs[1],
                out_channels: ks[0],
                input: [1, xs[2]],
                kernel: [1, ks[2]],
                pad: [(0, 0), pad[0]],
            }
        } else {
            ConvGeometry {
                batch: xs[0],
                in_channels: xs[1],
                out_channels: ks[0],
                input: [xs[2], xs[3]],
                kernel: [ks[2], ks[3]],
                pad: [pad[0], pad[1]],
            }
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Per-channel normalization of `x: [B, C, ...]`.
    ///
    /// With `stats = None` the batch statistics are used (and returned);
    /// otherwise the supplied mean/variance are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<&BatchStats<T>>,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() >= 2, "batch_norm: need [B, C, ...], got {:?}", xs);
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        ensure!(b * s > 0, "batch_norm: empty batch");
        ensure!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            "batch_norm: affine parameters must have shape [{c}]"
        );
        let xv = self.value(x).data();
        let count = T::lit((b * s) as f64);
        let (mean, var) = match stats {
            Some(st) => {
                ensure!(st.mean.len() == c && st.var.len() == c, "batch_norm: stats length");
                (st.mean.clone(), st.var.clone())
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let plane = &xv[(bi * c + ci) * s..][..s];
                        mean[ci] += plane.iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / count);
                for bi in 0..b {
                    for ci in 0..c {
                        let plane = &xv[(bi * c + ci) * s..][..s];
                        var[ci] += plane.iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / count);
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                for i in off..off + s {
                    xhat[i] = (xv[i] - mean[ci]) * inv_std[ci];
                    out[i] = g[ci] * xhat[i] + bt[ci];
                }
            }
        }
        let out = Tensor::new(xs, out)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: stats.is_none(),
            },
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Mean over all spatial positions: `[B, C, ...] → [B, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() >= 2, "mean_spatial: need [B, C, ...], got {:?}", xs);
        let s: usize = xs[2..].iter().product();
        ensure!(s > 0, "mean_spatial: empty spatial extent");
        let inv = T::one() / T::lit(s as f64);
        let data = self
            .value(x)
            .data()
            .chunks(s)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new([xs[0], xs[1]], data)?;
        Ok(self.push(out, Op::MeanSpatial(x)))
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        ensure!(ls.len() == 2, "cross entropy: logits must be [B, K], got {:?}", ls);
        let (b, k) = (ls[0], ls[1]);
        ensure!(b > 0, "cross entropy: empty batch");
        ensure!(labels.len() == b, "cross entropy: {} labels for batch {b}", labels.len());
        ensure!(labels.iter().all(|&l| l < k), "cross entropy: label out of range");
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for (i, row) in self.value(logits).data().chunks(k).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[i]];
        }
        let out = Tensor::scalar(loss / T::lit(b as f64));
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Gradients accumulated so far, one entry per registered parameter.
    pub fn gradients(&self) -> &Gradients<T> {
        &self.grads
    }

    pub fn into_gradients(self) -> Gradients<T> {
        self.grads
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Propagates d`output`/d(every parameter) and adds it to the stored
    /// gradients. Parameters that do not influence `output` get zeros.
    pub fn backward(&mut self, output: Var) -> Result<&Gradients<T>> {
        ensure!(
            self.value(output).len() == 1,
            "backward needs a single-element output, got shape {:?}",
            self.shape(output)
        );
        for node in &self.nodes[..=output.0] {
            node.value.check_finite(node.op.name())?;
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(self.shape(output).to_vec()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            g.check_finite(&format!("backward({})", node.op.name()))?;
            if matches!(node.op, Op::Param(_)) {
                self.settle_param(idx, g)?;
                continue;
            }
            for (v, dg) in self.local_grads(node, g)? {
                accumulate(&mut grads[v.0], dg)?;
            }
        }
        for (name, v) in &self.params {
            if !self.grads.contains_key(name) {
                let zeros = Tensor::zeros(self.nodes[v.0].value.shape().to_vec());
                self.grads.insert(name.clone(), zeros);
            }
        }
        Ok(&self.grads)
    }

    /// Chain-rule contributions from one node to its inputs.
    fn local_grads(&self, node: &Node<T>, g: Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Constant => vec![],
            Op::Param(_) => unreachable!("params are handled by backward()"),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |g, y| g * y)?),
                (*b, g.zip_map(val(*a), |g, x| g * x)?),
            ],
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = g.clone();
                let mut gb = g;
                for i in 0..ga.len() {
                    if av.data()[i] <= bv.data()[i] {
                        gb.data_mut()[i] = T::zero();
                    } else {
                        ga.data_mut()[i] = T::zero();
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = g.clone();
                let mut gb = g;
                for i in 0..ga.len() {
                    if av.data()[i] >= bv.data()[i] {
                        gb.data_mut()[i] = T::zero();
                    } else {
                        ga.data_mut()[i] = T::zero();
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Neg(a) => vec![(*a, g.map(|x| -x))],
            Op::Scale(a, s) => {
                let s = *s;
                vec![(*a, g.map(|x| x * s))]
            }
            Op::AddScalar(a) => vec![(*a, g)],
            Op::Sin(a) => vec![(*a, g.zip_map(val(*a), |g, x| g * x.cos())?)],
            Op::Exp(a) => vec![(*a, g.zip_map(&node.value, |g, y| g * y)?)],
            Op::Square(a) => {
                let two = T::lit(2.0);
                vec![(*a, g.zip_map(val(*a), |g, x| g * two * x)?)]
            }
            Op::Abs(a) => vec![(
                *a,
                g.zip_map(val(*a), |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })?,
            )],
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(val(*a), |g, x| if x > T::zero() { g } else { T::zero() })?,
            )],
            Op::Softplus(a) => vec![(*a, g.zip_map(val(*a), |g, x| g * sigmoid(x))?)],
            Op::Recip(a) => vec![(*a, g.zip_map(&node.value, |g, y| -g * y * y)?)],
            Op::AddRow(x, v) => {
                let n = val(*v).len();
                let mut gv = vec![T::zero(); n];
                for (i, &gi) in g.data().iter().enumerate() {
                    gv[i % n] += gi;
                }
                vec![(*x, g), (*v, Tensor::from_vec(gv))]
            }
            Op::MulRow(x, v) => {
                let (xv, vv) = (val(*x), val(*v));
                let n = vv.len();
                let mut gv = vec![T::zero(); n];
                let mut gx = g.clone();
                for (i, gi) in g.data().iter().enumerate() {
                    gv[i % n] += *gi * xv.data()[i];
                    gx.data_mut()[i] = *gi * vv.data()[i % n];
                }
                vec![(*x, gx), (*v, Tensor::from_vec(gv))]
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (m, k) = (xv.shape()[0], xv.shape()[1]);
                let n = wv.shape()[0];
                // dx = g · w
                let mut dx = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, wv.data(), k as isize, 1, T::zero(), &mut dx, k as isize, 1);
                // dw = gᵀ · x
                let mut dw = vec![T::zero(); n * k];
                T::gemm(n, m, k, T::one(), g.data(), 1, n as isize, xv.data(), k as isize, 1, T::zero(), &mut dw, k as isize, 1);
                let mut res = vec![
                    (*x, Tensor::new([m, k], dx)?),
                    (*w, Tensor::new([n, k], dw)?),
                ];
                if let Some(b) = b {
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    res.push((*b, Tensor::from_vec(db)));
                }
                res
            }
            Op::Transpose(x) => vec![(*x, g.transpose()?)],
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape().to_vec())?)],
            Op::SumAll(x) => {
                let gs = g.data()[0];
                vec![(*x, Tensor::full(val(*x).shape().to_vec(), gs))]
            }
            Op::MeanAll(x) => {
                let xv = val(*x);
                let gs = g.data()[0] / T::lit(xv.len().max(1) as f64);
                vec![(*x, Tensor::full(xv.shape().to_vec(), gs))]
            }
            Op::MaxAll { x, arg } => {
                let mut gx = Tensor::zeros(val(*x).shape().to_vec());
                gx.data_mut()[*arg] = g.data()[0];
                vec![(*x, gx)]
            }
            Op::MaxLast { x, args } => {
                let xv = val(*x);
                let n = xv.shape()[xv.rank() - 1];
                let mut gx = Tensor::zeros(xv.shape().to_vec());
                for (row, (&a, &gi)) in args.iter().zip(g.data()).enumerate() {
                    gx.data_mut()[row * n + a] = gi;
                }
                vec![(*x, gx)]
            }
            Op::Crop { x, starts } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.shape().to_vec());
                let mut it = g.data().iter();
                for_each_window_offset(xv.shape(), g.shape(), starts, |off| {
                    gx.data_mut()[off] += *it.next().expect("window size");
                });
                vec![(*x, gx)]
            }
            Op::Conv { x, k, geom } => {
                let (dx, dk) = conv::correlate_backward(geom, val(*x).data(), val(*k).data(), g.data())?;
                vec![
                    (*x, Tensor::new(val(*x).shape().to_vec(), dx)?),
                    (*k, Tensor::new(val(*k).shape().to_vec(), dk)?),
                ]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = val(*x).shape();
                let (b, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let gm = val(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * s;
                        for i in off..off + s {
                            dgamma[ci] += gd[i] * xhat[i];
                            dbeta[ci] += gd[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); gd.len()];
                let count = T::lit((b * s) as f64);
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * s;
                        let scale = gm[ci] * inv_std[ci];
                        for i in off..off + s {
                            dx[i] = if *batch_stats {
                                // (N·dy − Σdy − x̂·Σ(dy·x̂)) · γ / (N·σ)
                                scale * (gd[i] - dbeta[ci] / count - xhat[i] * dgamma[ci] / count)
                            } else {
                                scale * gd[i]
                            };
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(xs.to_vec(), dx)?),
                    (*gamma, Tensor::from_vec(dgamma)),
                    (*beta, Tensor::from_vec(dbeta)),
                ]
            }
            Op::MeanSpatial(x) => {
                let xs = val(*x).shape();
                let s: usize = xs[2..].iter().product();
                let inv = T::one() / T::lit(s as f64);
                let mut dx = Vec::with_capacity(s * g.len());
                for &gi in g.data() {
                    dx.extend(std::iter::repeat_n(gi * inv, s));
                }
                vec![(*x, Tensor::new(xs.to_vec(), dx)?)]
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
            } => {
                let ls = val(*logits).shape();
                let (b, k) = (ls[0], ls[1]);
                let scale = g.data()[0] / T::lit(b as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, Tensor::new([b, k], d)?)]
            }
        };
        Ok(out)
    }
}

impl<T: Scalar> Tape<T> {
    /// Gradient bookkeeping for parameter leaves lives here so that
    /// `local_grads` stays a pure function of the node.
    fn settle_param(&mut self, idx: usize, g: Tensor<T>) -> Result<()> {
        if let Op::Param(name) = &self.nodes[idx].op {
            match self.grads.get_mut(name) {
                Some(acc) => {
                    *acc = acc.zip_map(&g, |a, b| a + b)?;
                }
                None => {
                    self.grads.insert(name.clone(), g);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => {
            ensure!(acc.shape() == g.shape(), "gradient shape mismatch");
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
    Ok(())
}

fn argmax<T: Scalar>(xs: &[T]) -> (usize, T) {
    let mut best = (0, xs[0]);
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Calls `f` with the flat source offset of every element of a window of
/// extents `window` starting at `starts` inside an array of shape `shape`,
/// in row-major window order.
fn for_each_window_offset(shape: &[usize], window: &[usize], starts: &[usize], mut f: impl FnMut(usize)) {
    let rank = shape.len();
    if window.contains(&0) {
        return;
    }
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut idx = vec![0usize; rank];
    loop {
        let off: usize = (0..rank).map(|i| (starts[i] + idx[i]) * strides[i]).sum();
        f(off);
        let mut axis = rank;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < window[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::scalar(3.0));
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g["x"].data(), &[6.0]);
    }

    #[test]
    fn sine_derivative_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::scalar(0.0));
        let y = tape.sin(x);
        assert_eq!(tape.backward(y).unwrap()["x"].data(), &[1.0]);
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::ones([2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_is_reported_with_operation_name() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::scalar(0.0));
        let r = tape.recip(x);
        let z = tape.scale(r, 0.0);
        match tape.backward(z) {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, "recip"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn unused_parameters_get_exact_zeros_and_calls_accumulate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::scalar(2.0));
        let _unused = tape.param("w", Tensor::ones([2, 3]));
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.gradients()["w"], Tensor::zeros([2, 3]));
        tape.backward(y).unwrap();
        assert_eq!(tape.gradients()["x"].data(), &[8.0]);
        tape.zero_grad();
        assert!(tape.gradients().is_empty());
    }

    #[test]
    fn shared_parameter_paths_sum() {
        // f(x) = x·x + 3x at x = 2 → 2x + 3 = 7
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::scalar(2.0));
        let xx = tape.mul(x, x).unwrap();
        let x3 = tape.scale(x, 3.0);
        let y = tape.add(xx, x3).unwrap();
        assert_eq!(tape.backward(y).unwrap()["x"].data(), &[7.0]);
    }

    #[test]
    fn crop_extracts_window_and_scatters_gradient() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let x = tape.param("x", Tensor::new([1, 4, 4], data).unwrap());
        let c = tape.crop(x, &[1, 2], &[2, 2]).unwrap();
        assert_eq!(tape.value(c).data(), &[6.0, 7.0, 10.0, 11.0]);
        let s = tape.sum(c);
        let g = &tape.backward(s).unwrap()["x"];
        assert_eq!(g.data().iter().filter(|&&v| v == 1.0).count(), 4);
        assert_eq!(g.get(&[0, 2, 3]), 1.0);
        assert_eq!(g.get(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-3f64, 0.5, 3.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let l = tape.param("l", Tensor::zeros([2, 4]));
        let loss = tape.softmax_cross_entropy(l, &[0, 3]).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
        let g = &tape.backward(loss).unwrap()["l"];
        assert!((g.get(&[0, 0]) - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g.get(&[1, 0]) - 0.25 / 2.0).abs() < 1e-12);
    }
}
