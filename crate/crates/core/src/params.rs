//! Named parameter storage.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Whether a stored tensor is optimized or only carried along (batchnorm
/// running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    /// Dotted path, e.g. `wd.res1.sep.depthwise`.
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
    pub kind: ParamKind,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
            frozen: false,
            kind: ParamKind::Weight,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// True when an optimizer is allowed to change this tensor.
    pub fn trainable(&self) -> bool {
        self.kind == ParamKind::Weight && !self.frozen
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Insertion-ordered parameter collection with unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<ParamId> {
        if self.index.contains_key(&param.name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{}`",
                param.name
            )));
        }
        let id = ParamId(self.params.len());
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.insert(Parameter::new(name, tensor))
            .expect("parameter names are generated uniquely")
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor) -> ParamId {
        let mut p = Parameter::new(name, tensor);
        p.kind = ParamKind::Buffer;
        self.insert(p)
            .expect("parameter names are generated uniquely")
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Marks every parameter whose name starts with one of `prefixes` as
    /// frozen. Each prefix must match at least one parameter.
    pub fn freeze_prefixes<S: AsRef<str>>(&mut self, prefixes: &[S]) -> Result<()> {
        for prefix in prefixes {
            let prefix = prefix.as_ref();
            if !self.params.iter().any(|p| has_prefix(&p.name, prefix)) {
                return Err(Error::UnknownPrefix {
                    prefix: prefix.to_string(),
                    known: self.known_prefixes().join(", "),
                });
            }
        }
        for p in &mut self.params {
            p.frozen = prefixes.iter().any(|pre| has_prefix(&p.name, pre.as_ref()));
        }
        Ok(())
    }

    /// Distinct two-component name prefixes (`wd.stem`, `wi.res1`, ...).
    pub fn known_prefixes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            let prefix: String = p.name.split('.').take(2).collect::<Vec<_>>().join(".");
            if !out.contains(&prefix) {
                out.push(prefix);
            }
        }
        out
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.len())
            .sum()
    }
}

/// Initial value of a freshly created tensor.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±bound`.
    Uniform(f32),
    /// Uniform in `±√(6 / fan_in)`.
    HeUniform {
        fan_in: usize,
    },
}

/// Declares an architecture's tensors either by creating them (with a
/// seeded generator) or by locating them in an existing store, checking
/// each shape. Architecture code calls the same methods in both cases.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: Option<Rng>,
    seen: Vec<ParamId>,
}

impl<'a> Builder<'a> {
    pub fn init(store: &'a mut ParamStore, rng: Rng) -> Self {
        Self {
            store,
            rng: Some(rng),
            seen: Vec::new(),
        }
    }

    pub fn locate(store: &'a mut ParamStore) -> Self {
        Self {
            store,
            rng: None,
            seen: Vec::new(),
        }
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.declare(name, shape, init, ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.declare(name, shape, init, ParamKind::Buffer)
    }

    fn declare(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        kind: ParamKind,
    ) -> Result<ParamId> {
        let Some(rng) = self.rng.as_mut() else {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let found = self.store.get(id).tensor.shape();
            if found != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {found:?}, architecture expects {shape:?}"
                )));
            }
            self.store.get_mut(id).kind = kind;
            self.seen.push(id);
            return Ok(id);
        };
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(a) => (0..n).map(|_| rng.range(-a, a)).collect(),
            Init::HeUniform { fan_in } => {
                let a = (6.0 / fan_in.max(1) as f32).sqrt();
                (0..n).map(|_| rng.range(-a, a)).collect()
            }
        };
        let mut p = Parameter::new(name, Tensor::new(shape, data)?);
        p.kind = kind;
        self.store.insert(p)
    }

    /// In locate mode, fails when the store holds tensors the architecture
    /// never declared.
    pub fn finish(self) -> Result<()> {
        if self.rng.is_some() {
            return Ok(());
        }
        let extra: Vec<&str> = self
            .store
            .iter()
            .filter(|(id, _)| !self.seen.contains(id))
            .map(|(_, p)| p.name.as_str())
            .collect();
        if !extra.is_empty() {
            return Err(Error::Checkpoint(format!(
                "tensors not used by the architecture: {}",
                extra.join(", ")
            )));
        }
        Ok(())
    }
}

/// Prefix match on whole dotted components: `wi.res1` matches
/// `wi.res1.conv_in.weight` but not `wi.res10.x`.
pub fn has_prefix(name: &str, prefix: &str) -> bool {
    let prefix = prefix.trim_end_matches('.');
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}
