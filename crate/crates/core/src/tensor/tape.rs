use serde::{Deserialize, Serialize};

use super::kernels::{self, Conv1dDims, ConvT1dDims, Depthwise2dDims};
use super::{permute_data, Precision, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Silu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    Conv1d {
        x: Var,
        k: Var,
        b: Option<Var>,
        dims: Conv1dDims,
    },
    ConvT1d {
        x: Var,
        k: Var,
        b: Option<Var>,
        dims: ConvT1dDims,
    },
    Depthwise2d {
        x: Var,
        k: Var,
        dims: Depthwise2dDims,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        dim: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Act(Var, Activation),
    Permute {
        x: Var,
        inverse: Vec<usize>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        offset: usize,
    },
    MulRows(Var, Var),
    AddRows(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Linear { .. } => "linear",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvT1d { .. } => "transposed_conv1d",
            Op::Depthwise2d { .. } => "depthwise_conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Act(..) => "activation",
            Op::Permute { .. } => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice_rows",
            Op::MulRows(..) => "mul_rows",
            Op::AddRows(..) => "add_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications for one forward pass.
///
/// Nodes are appended in evaluation order, so reverse index order is a
/// reverse topological order. Drop the tape after backward to free it.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    #[cfg(test)]
    flip_backward: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Precision::F64)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient of `v`, or `None` if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient of `v`, zeros when unreachable.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::full_unchecked(&self.shapes[v.0], 0.0))
    }
}

impl Tensor {
    fn full_unchecked(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            #[cfg(test)]
            flip_backward: None,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Negate the backward map of one primitive kind. Mutation-testing hook.
    #[cfg(test)]
    pub(crate) fn inject_sign_flip(&mut self, op: &'static str) {
        self.flip_backward = Some(op);
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        value.round_to(self.precision);
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// `y = x W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return shape_err("linear", &xs, &ws);
        }
        let (d_in, d_out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return shape_err("linear(bias)", self.shape(b), &[d_out]);
            }
        }
        let rows = self.value(x).len() / d_in;
        let mut out = vec![0.0; rows * d_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * d_out..(r + 1) * d_out].copy_from_slice(bv);
            }
        }
        kernels::matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, rows, d_in, d_out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        self.push(
            Tensor { shape, data: out },
            Op::Linear {
                x,
                w,
                b,
                rows,
                d_in,
                d_out,
            },
            rg,
        )
    }

    /// Cross-correlation of `x[C_in, T]` (or batched `x[B, C_in, T]`) with
    /// `kernel[C_out, C_in, K]`, zero padding on both sides.
    pub fn conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (batch, c_in, len) = match xs.as_slice() {
            [c, t] => (1, *c, *t),
            [b, c, t] => (*b, *c, *t),
            _ => return shape_err("conv1d", &xs, &ks),
        };
        if ks.len() != 3 || ks[1] != c_in {
            return shape_err("conv1d", &xs, &ks);
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be >= 1".into()));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return shape_err("conv1d(bias)", self.shape(b), &[ks[0]]);
            }
        }
        let dims = Conv1dDims {
            batch,
            c_in,
            c_out: ks[0],
            len,
            k: ks[2],
            stride,
            padding,
        };
        let t_out = dims
            .out_len()
            .ok_or(Error::SequenceTooShort { op: "conv1d", len })?;
        let out = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            dims,
        );
        let shape = if xs.len() == 2 {
            vec![dims.c_out, t_out]
        } else {
            vec![batch, dims.c_out, t_out]
        };
        let rg = self.rg(&[x, kernel]) || bias.is_some_and(|b| self.rg(&[b]));
        self.push(
            Tensor { shape, data: out },
            Op::Conv1d {
                x,
                k: kernel,
                b: bias,
                dims,
            },
            rg,
        )
    }

    /// Transposed convolution `x[C_in, T]`, `kernel[C_in, C_out, K]` producing
    /// exactly `T * stride` frames; overhang is cropped symmetrically.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        if stride < 1 {
            return Err(Error::Config("transposed_conv1d stride must be >= 1".into()));
        }
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (batch, c_in, len) = match xs.as_slice() {
            [c, t] => (1, *c, *t),
            [b, c, t] => (*b, *c, *t),
            _ => return shape_err("transposed_conv1d", &xs, &ks),
        };
        if ks.len() != 3 || ks[0] != c_in {
            return shape_err("transposed_conv1d", &xs, &ks);
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[1]] {
                return shape_err("transposed_conv1d(bias)", self.shape(b), &[ks[1]]);
            }
        }
        let dims = ConvT1dDims {
            batch,
            c_in,
            c_out: ks[1],
            len,
            k: ks[2],
            stride,
        };
        let out = kernels::conv_transpose1d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            dims,
        );
        let shape = if xs.len() == 2 {
            vec![dims.c_out, dims.out_len()]
        } else {
            vec![batch, dims.c_out, dims.out_len()]
        };
        let rg = self.rg(&[x, kernel]) || bias.is_some_and(|b| self.rg(&[b]));
        self.push(
            Tensor { shape, data: out },
            Op::ConvT1d {
                x,
                k: kernel,
                b: bias,
                dims,
            },
            rg,
        )
    }

    /// Per-channel 2-D convolution of `x[C, H, W]` with `kernel[C, KH, KW]`,
    /// same-size output. Kernel sides must be odd.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 3 || xs[0] != ks[0] {
            return shape_err("depthwise_conv2d", &xs, &ks);
        }
        if ks[1] % 2 == 0 || ks[2] % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise_conv2d kernel sides must be odd, got {}x{}",
                ks[1], ks[2]
            )));
        }
        let dims = Depthwise2dDims {
            c: xs[0],
            h: xs[1],
            w: xs[2],
            kh: ks[1],
            kw: ks[2],
        };
        let out = kernels::depthwise2d_forward(self.value(x).data(), self.value(kernel).data(), dims);
        let rg = self.rg(&[x, kernel]);
        self.push(
            Tensor {
                shape: xs,
                data: out,
            },
            Op::Depthwise2d { x, k: kernel, dims },
            rg,
        )
    }

    /// Normalize over the last axis, then apply the optional affine.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let dim = *xs.last().ok_or(Error::Contract("layer_norm on scalar".into()))?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [dim] {
                return shape_err("layer_norm", self.shape(p), &[dim]);
            }
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be > 0".into()));
        }
        let xv = self.value(x).data();
        let rows = xv.len() / dim;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mu = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, v) in xhat[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                *h = (v - mu) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = self.value(g).data();
            out.chunks_mut(dim)
                .for_each(|row| row.iter_mut().zip(gv).for_each(|(o, g)| *o *= g));
        }
        if let Some(b) = beta {
            let bv = self.value(b).data();
            out.chunks_mut(dim)
                .for_each(|row| row.iter_mut().zip(bv).for_each(|(o, b)| *o += b));
        }
        let rg = self.rg(&[x]) || [gamma, beta].into_iter().flatten().any(|p| self.rg(&[p]));
        self.push(
            Tensor {
                shape: xs,
                data: out,
            },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                dim,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = self.value(x).map(|v| kind.apply(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Act(x, kind), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", &xs, perm);
        }
        let (shape, data) = permute_data(self.value(x).data(), &xs, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Permute { x, inverse }, rg)
    }

    /// Swap the two axes of a rank-2 node.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Concatenate along axis 0; trailing axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return shape_err("concat", self.shape(*first), s);
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = self.rg(parts);
        self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), rg)
    }

    /// Rows `start..start + len` of axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        let stride: usize = self.shape(x)[1..].iter().product();
        let rg = self.rg(&[x]);
        self.push(
            out,
            Op::Slice {
                x,
                offset: start * stride,
            },
            rg,
        )
    }

    fn row_view(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let (n, p) = (self.value(x).len(), self.value(v).len());
        if self.shape(v).len() != 1 || n % p != 0 {
            return shape_err(op, self.shape(x), self.shape(v));
        }
        let lead: usize = self
            .shape(x)
            .iter()
            .scan(1usize, |acc, &d| {
                *acc *= d;
                Some(*acc)
            })
            .find(|&a| a == p)
            .unwrap_or(0);
        if lead != p {
            return shape_err(op, self.shape(x), self.shape(v));
        }
        Ok(n / p)
    }

    /// `y[p, r] = x[p, r] * v[p]`, where `p` ranges over the leading axes of
    /// `x` whose product equals `len(v)`.
    pub fn mul_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let inner = self.row_view("mul_rows", x, v)?;
        let vv = self.value(v).data();
        let mut out = self.value(x).clone();
        out.data_mut()
            .chunks_mut(inner)
            .zip(vv)
            .for_each(|(row, s)| row.iter_mut().for_each(|o| *o *= s));
        let rg = self.rg(&[x, v]);
        self.push(out, Op::MulRows(x, v), rg)
    }

    /// `y[p, r] = x[p, r] + v[p]`; see [`Tape::mul_rows`].
    pub fn add_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let inner = self.row_view("add_rows", x, v)?;
        let vv = self.value(v).data();
        let mut out = self.value(x).clone();
        out.data_mut()
            .chunks_mut(inner)
            .zip(vv)
            .for_each(|(row, s)| row.iter_mut().for_each(|o| *o += s));
        let rg = self.rg(&[x, v]);
        self.push(out, Op::AddRows(x, v), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            #[allow(unused_mut)]
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            #[cfg(test)]
            if self.flip_backward == Some(node.op.name()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.backprop_node(node, &g, &mut grads);
            // leaves keep their gradient for retrieval
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        // intermediates were consumed; only leaves (and unused nodes) remain
        Ok(Grads {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = acc(grads, nodes, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = acc(grads, nodes, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(d) = acc(grads, nodes, *a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if let Some(d) = acc(grads, nodes, *b) {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::AddScalar(a) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sum(a) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                d_in,
                d_out,
            } => {
                if let Some(d) = acc(grads, nodes, *x) {
                    kernels::matmul_bt_acc(g, val(*w), d, *rows, *d_out, *d_in);
                }
                if let Some(d) = acc(grads, nodes, *w) {
                    kernels::matmul_at_acc(val(*x), g, d, *rows, *d_in, *d_out);
                }
                if let Some(b) = b {
                    if let Some(d) = acc(grads, nodes, *b) {
                        for r in 0..*rows {
                            d.iter_mut()
                                .zip(&g[r * d_out..(r + 1) * d_out])
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
            Op::Conv1d { x, k, b, dims } => {
                let mut dx = take_acc(grads, nodes, *x);
                let mut dk = take_acc(grads, nodes, *k);
                let mut db = b.and_then(|b| take_acc(grads, nodes, b));
                kernels::conv1d_backward(
                    val(*x),
                    val(*k),
                    g,
                    *dims,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                store(grads, *x, dx);
                store(grads, *k, dk);
                if let Some(b) = b {
                    store(grads, *b, db);
                }
            }
            Op::ConvT1d { x, k, b, dims } => {
                let mut dx = take_acc(grads, nodes, *x);
                let mut dk = take_acc(grads, nodes, *k);
                let mut db = b.and_then(|b| take_acc(grads, nodes, b));
                kernels::conv_transpose1d_backward(
                    val(*x),
                    val(*k),
                    g,
                    *dims,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                store(grads, *x, dx);
                store(grads, *k, dk);
                if let Some(b) = b {
                    store(grads, *b, db);
                }
            }
            Op::Depthwise2d { x, k, dims } => {
                let mut dx = take_acc(grads, nodes, *x);
                let mut dk = take_acc(grads, nodes, *k);
                kernels::depthwise2d_backward(
                    val(*x),
                    val(*k),
                    g,
                    *dims,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                store(grads, *x, dx);
                store(grads, *k, dk);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                dim,
                xhat,
                rstd,
            } => {
                let dim = *dim;
                if let Some(beta) = beta {
                    if let Some(d) = acc(grads, nodes, *beta) {
                        for row in g.chunks(dim) {
                            d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                if let Some(gamma) = gamma {
                    if let Some(d) = acc(grads, nodes, *gamma) {
                        for (row, hrow) in g.chunks(dim).zip(xhat.chunks(dim)) {
                            for j in 0..dim {
                                d[j] += row[j] * hrow[j];
                            }
                        }
                    }
                }
                let gv = gamma.map(|gm| val(gm).to_vec());
                if let Some(d) = acc(grads, nodes, *x) {
                    let mut dh = vec![0.0; dim];
                    for (r, (row, hrow)) in g.chunks(dim).zip(xhat.chunks(dim)).enumerate() {
                        for j in 0..dim {
                            dh[j] = row[j] * gv.as_ref().map_or(1.0, |gv| gv[j]);
                        }
                        let m1 = dh.iter().sum::<f64>() / dim as f64;
                        let m2 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                        let drow = &mut d[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            drow[j] += rstd[r] * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Act(x, kind) => {
                let xv = val(*x).to_vec();
                if let Some(d) = acc(grads, nodes, *x) {
                    for i in 0..d.len() {
                        d[i] += g[i] * kind.derivative(xv[i]);
                    }
                }
            }
            Op::Permute { x, inverse } => {
                if let Some(d) = acc(grads, nodes, *x) {
                    let (_, back) = permute_data(g, node.value.shape(), inverse);
                    d.iter_mut().zip(&back).for_each(|(d, g)| *d += g);
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = acc(grads, nodes, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if let Some(d) = acc(grads, nodes, p) {
                        d.iter_mut().zip(&g[off..off + n]).for_each(|(d, g)| *d += g);
                    }
                    off += n;
                }
            }
            Op::Slice { x, offset } => {
                if let Some(d) = acc(grads, nodes, *x) {
                    d[*offset..*offset + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::MulRows(x, v) => {
                let xv = val(*x).to_vec();
                let vv = val(*v).to_vec();
                let inner = xv.len() / vv.len();
                if let Some(d) = acc(grads, nodes, *x) {
                    for (p, s) in vv.iter().enumerate() {
                        for r in 0..inner {
                            d[p * inner + r] += g[p * inner + r] * s;
                        }
                    }
                }
                if let Some(d) = acc(grads, nodes, *v) {
                    for (p, dv) in d.iter_mut().enumerate() {
                        *dv += (0..inner)
                            .map(|r| g[p * inner + r] * xv[p * inner + r])
                            .sum::<f64>();
                    }
                }
            }
            Op::AddRows(x, v) => {
                let inner = nodes[x.0].value.len() / nodes[v.0].value.len();
                if let Some(d) = acc(grads, nodes, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = acc(grads, nodes, *v) {
                    for (p, dv) in d.iter_mut().enumerate() {
                        *dv += g[p * inner..(p + 1) * inner].iter().sum::<f64>();
                    }
                }
            }
        }
    }

    /// Gradients of a scalar `loss` with respect to `params`; parameters that
    /// do not reach the loss get zeros.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.backward(loss)?;
        Ok(params.iter().map(|&p| grads.get_or_zero(p)).collect())
    }
}

fn take_acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()]))
}

fn store(grads: &mut [Option<Vec<f64>>], v: Var, d: Option<Vec<f64>>) {
    if let Some(d) = d {
        grads[v.0] = Some(d);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let mut tape = Tape::default();
        let x = tape.constant(t(&[1, 2], &[1., 2.])).unwrap();
        let w = tape.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let b = tape.constant(t(&[2], &[0., 0.])).unwrap();
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2.]);

        let w0 = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let b3 = tape.constant(t(&[2], &[3., 4.])).unwrap();
        let y = tape.linear(x, w0, Some(b3)).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 4.]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::default();
        let x = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        let w = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let err = tape.linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv1d_identity_and_delta() {
        let mut tape = Tape::default();
        let x = tape.constant(t(&[1, 3], &[1., 2., 3.])).unwrap();
        let k1 = tape.constant(t(&[1, 1, 1], &[1.])).unwrap();
        let y = tape.conv1d(x, k1, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3.]);
        let k3 = tape.constant(t(&[1, 1, 3], &[0., 1., 0.])).unwrap();
        let y = tape.conv1d(x, k3, None, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3.]);
    }

    #[test]
    fn conv1d_too_short() {
        let mut tape = Tape::default();
        let x = tape.constant(t(&[1, 2], &[1., 2.])).unwrap();
        let k = tape.constant(Tensor::ones(&[1, 1, 5])).unwrap();
        assert!(matches!(
            tape.conv1d(x, k, None, 1, 0),
            Err(Error::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn transposed_conv_examples() {
        let mut tape = Tape::default();
        let x = tape.constant(t(&[1, 2], &[1., 1.])).unwrap();
        let k = tape.constant(t(&[1, 1, 2], &[1., 1.])).unwrap();
        let y = tape.conv_transpose1d(x, k, None, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 1., 1., 1.]);

        let x = tape.constant(t(&[1, 3], &[4., 5., 6.])).unwrap();
        let delta = tape.constant(t(&[1, 1, 1], &[1.])).unwrap();
        let y = tape.conv_transpose1d(x, delta, None, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[4., 5., 6.]);

        assert!(matches!(
            tape.conv_transpose1d(x, delta, None, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn depthwise_delta_zero_and_even() {
        let mut tape = Tape::default();
        let mut rng = crate::rng::stream(1, "test");
        let xt = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let x = tape.constant(xt.clone()).unwrap();
        let mut kd = Tensor::zeros(&[2, 3, 3]);
        kd.data_mut()[4] = 1.0;
        kd.data_mut()[9 + 4] = 1.0;
        let k = tape.constant(kd).unwrap();
        let y = tape.depthwise_conv2d(x, k).unwrap();
        assert_eq!(tape.value(y), &xt);
        let kz = tape.constant(Tensor::zeros(&[2, 3, 3])).unwrap();
        let y = tape.depthwise_conv2d(x, kz).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let ke = tape.constant(Tensor::zeros(&[2, 2, 3])).unwrap();
        assert!(matches!(tape.depthwise_conv2d(x, ke), Err(Error::Config(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::default();
        let x = tape.constant(t(&[1, 4], &[3., 3., 3., 3.])).unwrap();
        let y = tape.layer_norm(x, None, None, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let x = tape.constant(t(&[2], &[-1., 1.])).unwrap();
        let y = tape.layer_norm(x, None, None, 1e-12).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(tape.value(y).data()[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn activations_at_zero() {
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert_eq!(Activation::Silu.apply(0.0), 0.0);
    }

    #[test]
    fn grad_of_sum_and_zero_scale() {
        let mut tape = Tape::default();
        let x = tape.param(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let unused = tape.param(Tensor::ones(&[3])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.grad(s, &[x, unused]).unwrap();
        assert_eq!(g[0].data(), &[1.; 4]);
        assert_eq!(g[1].data(), &[0.; 3]);

        let z = tape.scale(x, 0.0).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.grad(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::default();
        let x = tape.param(Tensor::ones(&[2])).unwrap();
        assert!(matches!(tape.grad(x, &[x]), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::default();
        let x = tape.param(t(&[1], &[3.])).unwrap();
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.grad(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[7.]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::default();
        let x = tape.constant(t(&[1], &[f64::MAX])).unwrap();
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn mul_rows_requires_leading_axes() {
        let mut tape = Tape::default();
        let x = tape.constant(Tensor::ones(&[2, 3, 4])).unwrap();
        let ok = tape.constant(Tensor::ones(&[6])).unwrap();
        let bad = tape.constant(Tensor::ones(&[4])).unwrap();
        assert!(tape.mul_rows(x, ok).is_ok());
        assert!(tape.mul_rows(x, bad).is_err());
    }
}
