//! Parameters, their initialization, and the two dense layer types.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Var;
use crate::error::{dim_err, Error, Result};
use crate::ops;
use crate::tensor::{Real, Tensor};

/// How a parameter's initial values were produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum InitRule {
    /// Uniform in ±√(6/(fan_in+fan_out)).
    XavierUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamMeta {
    pub shape: Vec<usize>,
    pub init: InitRule,
    pub seed: u64,
}

struct ParamInner<T: Real> {
    name: String,
    var: RefCell<Var<T>>,
    meta: ParamMeta,
}

/// Named, gradient-bearing weight. Cloning shares the underlying storage.
pub struct Param<T: Real>(Rc<ParamInner<T>>);

impl<T: Real> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param(Rc::clone(&self.0))
    }
}

impl<T: Real> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.0.name)
            .field("shape", &self.0.meta.shape)
            .finish()
    }
}

impl<T: Real> Param<T> {
    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn meta(&self) -> &ParamMeta {
        &self.0.meta
    }

    /// Graph handle for use in a forward pass.
    pub fn var(&self) -> Var<T> {
        self.0.var.borrow().clone()
    }

    pub fn value(&self) -> Tensor<T> {
        self.0.var.borrow().value().clone()
    }

    pub fn numel(&self) -> usize {
        self.0.meta.shape.iter().product()
    }

    /// Replaces the value; clears the gradient.
    pub fn set_value(&self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.0.meta.shape.as_slice() {
            return dim_err("set_value", &self.0.meta.shape, value.shape());
        }
        *self.0.var.borrow_mut() = Var::leaf(value);
        Ok(())
    }

    /// Accumulated gradient; zeros if the parameter did not influence the loss.
    pub fn grad(&self) -> Tensor<T> {
        self.0.var.borrow().grad_or_zeros()
    }

    pub fn zero_grad(&self) {
        self.0.var.borrow().zero_grad();
    }
}

/// Insertion-ordered collection of uniquely named parameters.
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn insert(&mut self, p: Param<T>) -> Result<()> {
        if self.by_name.contains_key(p.name()) {
            return Err(Error::Internal(format!("duplicate parameter name {}", p.name())));
        }
        self.by_name.insert(p.name().to_string(), self.params.len());
        self.params.push(p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Param::zero_grad);
    }

    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(Param::value).collect()
    }

    pub fn restore(&self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Argument("snapshot does not match store".into()));
        }
        for (p, v) in self.params.iter().zip(values) {
            p.set_value(v.clone())?;
        }
        Ok(())
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Param<T>> + 'a {
        self.params.iter().filter(move |p| p.name().starts_with(prefix))
    }
}

/// Creates parameters from one seeded stream, in a fixed order.
pub struct ParamBuilder<T: Real> {
    seed: u64,
    rng: ChaCha8Rng,
    store: ParamStore<T>,
}

impl<T: Real> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::default(),
        }
    }

    fn register(&mut self, name: String, value: Tensor<T>, init: InitRule) -> Result<Param<T>> {
        let p = Param(Rc::new(ParamInner {
            name,
            meta: ParamMeta {
                shape: value.shape().to_vec(),
                init,
                seed: self.seed,
            },
            var: RefCell::new(Var::leaf(value)),
        }));
        self.store.insert(p.clone())?;
        Ok(p)
    }

    pub fn xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<Param<T>> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::from_f64_lossy(self.rng.gen_range(-bound..bound)))
            .collect();
        let value = Tensor::matrix(rows, cols, data)?;
        self.register(
            name.into(),
            value,
            InitRule::XavierUniform {
                fan_in: rows,
                fan_out: cols,
            },
        )
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<Param<T>> {
        self.register(name.into(), Tensor::zeros(&[rows, cols]), InitRule::Zeros)
    }

    /// Rectangular identity (ones on the main diagonal).
    pub fn identity(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<Param<T>> {
        let mut t = Tensor::zeros(&[rows, cols]);
        for i in 0..rows.min(cols) {
            t.set(i, i, T::one());
        }
        self.register(name.into(), t, InitRule::Identity)
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

/// Per-run settings threaded through forward passes.
pub struct RunCtx {
    /// Enables dropout.
    pub training: bool,
    /// Keep every attention matrix for inspection.
    pub retain_attention: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl RunCtx {
    pub fn inference() -> Self {
        Self {
            training: false,
            retain_attention: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            retain_attention: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn retaining(mut self) -> Self {
        self.retain_attention = true;
        self
    }

    /// Inverted-dropout mask with keep probability `1 - p`.
    pub(crate) fn dropout_mask<T: Real>(&self, len: usize, p: f64) -> Vec<T> {
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mut rng = self.rng.borrow_mut();
        (0..len)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect()
    }
}

/// Affine map `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear<T: Real> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(pb: &mut ParamBuilder<T>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.xavier(format!("{name}.weight"), d_in, d_out)?,
            bias: Some(pb.zeros(format!("{name}.bias"), 1, d_out)?),
        })
    }

    /// Weight only, as used by the attention projections.
    pub fn no_bias(pb: &mut ParamBuilder<T>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.xavier(format!("{name}.weight"), d_in, d_out)?,
            bias: None,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.meta().shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.meta().shape[1]
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        if x.cols() != self.d_in() {
            return dim_err("linear", x.shape(), &self.weight.meta().shape);
        }
        let y = ops::matmul(x, &self.weight.var())?;
        match &self.bias {
            Some(b) => ops::add_row(&y, &b.var()),
            None => Ok(y),
        }
    }
}

/// Position-wise two-layer network with a rectifier in between.
#[derive(Clone, Debug)]
pub struct FeedForward<T: Real> {
    pub inner: Linear<T>,
    pub outer: Linear<T>,
    /// Dropout probability on the hidden activations (training only).
    pub dropout: f64,
}

impl<T: Real> FeedForward<T> {
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        dropout: f64,
    ) -> Result<Self> {
        if hidden == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::Config(format!(
                "{name}: feed-forward widths must be positive ({d_in}/{hidden}/{d_out})"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("{name}: dropout {dropout} not in [0,1)")));
        }
        Ok(Self {
            inner: Linear::new(pb, &format!("{name}.inner"), d_in, hidden)?,
            outer: Linear::new(pb, &format!("{name}.outer"), hidden, d_out)?,
            dropout,
        })
    }

    pub fn d_in(&self) -> usize {
        self.inner.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.outer.d_out()
    }

    pub fn params(&self) -> Vec<Param<T>> {
        [&self.inner, &self.outer]
            .into_iter()
            .flat_map(|l| std::iter::once(l.weight.clone()).chain(l.bias.clone()))
            .collect()
    }

    pub fn forward(&self, x: &Var<T>, ctx: &RunCtx) -> Result<Var<T>> {
        if x.cols() != self.d_in() {
            return dim_err("ffn_forward", x.shape(), &[self.d_in()]);
        }
        let mut h = ops::relu(&self.inner.forward(x)?);
        if ctx.training && self.dropout > 0.0 {
            let mask = ctx.dropout_mask::<T>(h.value().len(), self.dropout);
            h = ops::mul_const(&h, &Tensor::new(h.shape().to_vec(), mask)?)?;
        }
        self.outer.forward(&h)
    }
}
