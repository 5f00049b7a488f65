//! Named parameter storage and the small layer types built on it.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replace a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::CheckpointTensor {
            name: name.to_string(),
            reason: "unknown parameter".into(),
        })?;
        if self.tensors[i].shape() != t.shape() {
            return Err(Error::CheckpointTensor {
                name: name.to_string(),
                reason: format!(
                    "shape {:?} does not match expected {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                ),
            });
        }
        self.tensors[i] = t;
        Ok(())
    }

    /// Add independent `N(0, std^2)` noise to every entry. Used to move
    /// zero-initialized heads off their degenerate starting point in checks.
    pub fn jitter(&mut self, std: f64, rng: &mut StreamRng) {
        for t in &mut self.tensors {
            let noise = Tensor::randn(t.shape(), std, rng);
            for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
                *a += b;
            }
        }
    }

    /// Place every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        self.tensors
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()
            .map(Bound)
    }

    /// Place every parameter on `tape` as a constant (no gradient).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Bound> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()
            .map(Bound)
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Normal(f64),
}

/// Registers parameters under a name prefix, drawing initial values from `rng`.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut StreamRng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut StreamRng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Run `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_>) -> T) -> T {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut sub = Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut sub)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::FanIn { fan_in, gain } => {
                Tensor::randn(shape, gain / (fan_in.max(1) as f64).sqrt(), self.rng)
            }
            Init::Normal(std) => Tensor::randn(shape, std, self.rng),
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.add(full, t)
    }
}

/// `y = x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(bld: &mut Builder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_init(bld, name, d_in, d_out, Init::FanIn { fan_in: d_in, gain: 1.0 })
    }

    pub fn zeros(bld: &mut Builder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_init(bld, name, d_in, d_out, Init::Zeros)
    }

    pub fn with_init(bld: &mut Builder<'_>, name: &str, d_in: usize, d_out: usize, init: Init) -> Self {
        bld.scope(name, |b| Self {
            w: b.param("weight", &[d_in, d_out], init),
            b: Some(b.param("bias", &[d_out], Init::Zeros)),
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.get(self.w), self.b.map(|b| p.get(b)))
    }
}

/// 1-D convolution over `[C_in, T]` or `[B, C_in, T]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    /// Stride-1 convolution with same padding (`k` odd).
    pub fn same(bld: &mut Builder<'_>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        Self::new(bld, name, c_in, c_out, k, 1, k / 2, true)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        bld: &mut Builder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        bld.scope(name, |b| Self {
            kernel: b.param(
                "weight",
                &[c_out, c_in, k],
                Init::FanIn {
                    fan_in: c_in * k,
                    gain: 1.0,
                },
            ),
            bias: bias.then(|| b.param("bias", &[c_out], Init::Zeros)),
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv1d(
            x,
            p.get(self.kernel),
            self.bias.map(|b| p.get(b)),
            self.stride,
            self.padding,
        )
    }
}

/// Transposed 1-D convolution producing `T * stride` frames.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
}

impl ConvTranspose1d {
    pub fn new(bld: &mut Builder<'_>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        bld.scope(name, |b| Self {
            kernel: b.param(
                "weight",
                &[c_in, c_out, k],
                Init::FanIn {
                    fan_in: c_in * k.div_ceil(stride.max(1)),
                    gain: 1.0,
                },
            ),
            bias: Some(b.param("bias", &[c_out], Init::Zeros)),
            stride,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv_transpose1d(x, p.get(self.kernel), self.bias.map(|b| p.get(b)), self.stride)
    }
}

/// Layer normalization over the last axis with learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(bld: &mut Builder<'_>, name: &str, dim: usize) -> Self {
        bld.scope(name, |b| Self {
            gamma: b.param("gamma", &[dim], Init::Ones),
            beta: b.param("beta", &[dim], Init::Zeros),
            eps: LN_EPS,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, Some(p.get(self.gamma)), Some(p.get(self.beta)), self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn builder_scopes_names() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "init");
        let mut b = Builder::new(&mut store, &mut r);
        b.scope("enc", |b| {
            Linear::new(b, "proj", 3, 4);
        });
        assert_eq!(store.names(), &["enc.proj.weight", "enc.proj.bias"]);
        assert_eq!(store.num_scalars(), 16);
    }

    #[test]
    fn set_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[2]));
        let err = store.set("a", Tensor::zeros(&[3])).unwrap_err().to_string();
        assert!(err.contains("`a`"), "{err}");
        assert!(store.set("b", Tensor::zeros(&[2])).is_err());
    }
}
