//! Named parameter tensors and their binding onto a tape.

use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamLayout`] / [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside two std.
    TruncNormal(f64),
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether AdamW applies weight decay to this tensor.
    pub decay: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered parameter declarations. Registration order is the checkpoint
/// order and the initialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter {name}"
        );
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
            decay,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    /// Draws every parameter from one seeded stream, in registration order.
    pub fn init<T: Element>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = self
            .specs
            .iter()
            .map(|spec| {
                let n = spec.numel();
                let data: Vec<T> = match spec.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("valid std");
                        (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect()
                    }
                    Init::TruncNormal(std) => (0..n).map(|_| T::lit(trunc_normal(&mut rng, std))).collect(),
                };
                Tensor::new(&spec.shape, data)
                    .expect("layout shapes are valid")
                    .with_requires_grad(true)
            })
            .collect();
        ParamStore {
            names: self.specs.iter().map(|s| s.name.clone()).collect(),
            decay: self.specs.iter().map(|s| s.decay).collect(),
            tensors,
        }
    }
}

fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    let dist = Normal::new(0.0, std).expect("valid std");
    loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Parameter values in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    decay: Vec<bool>,
}

impl<T: Element> ParamStore<T> {
    /// Builds a store from tensors that must match `layout` name-for-name and
    /// shape-for-shape.
    pub fn from_tensors(layout: &ParamLayout, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        if named.len() != layout.len() {
            bail!(
                Config,
                "expected {} parameter tensors, found {}",
                layout.len(),
                named.len()
            );
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (spec, (name, t)) in layout.specs().iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                bail!(
                    Config,
                    "parameter {name} {:?} does not match layout entry {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                );
            }
            tensors.push(t.with_requires_grad(true));
        }
        Ok(ParamStore {
            names: layout.specs().iter().map(|s| s.name.clone()).collect(),
            decay: layout.specs().iter().map(|s| s.decay).collect(),
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect())
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Adds the leaf gradients of `bound` into each parameter's `grad`.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.as_f64()))
            .collect()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            decay: self.decay.clone(),
        }
    }

    pub fn map_values(&mut self, mut f: impl FnMut(&str, &mut [T])) {
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            f(name, t.data_mut());
        }
    }
}

/// Tape handles of a bound [`ParamStore`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Affine map parameters: weight `[out, in]`, bias `[out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearParams {
    pub fn register(layout: &mut ParamLayout, prefix: &str, in_features: usize, out_features: usize) -> Self {
        LinearParams {
            weight: layout.register(
                format!("{prefix}.weight"),
                &[out_features, in_features],
                Init::TruncNormal(0.02),
                true,
            ),
            bias: layout.register(format!("{prefix}.bias"), &[out_features], Init::Zeros, true),
            in_features,
            out_features,
        }
    }

    /// Per-pixel channel map on an NCHW tensor.
    pub fn apply_channels<T: Element>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.channel_linear(x, bound[self.weight], Some(bound[self.bias]))
    }

    /// Map over the trailing dimension.
    pub fn apply<T: Element>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound[self.weight], Some(bound[self.bias]))
    }
}
