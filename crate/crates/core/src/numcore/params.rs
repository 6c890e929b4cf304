use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use super::{NumError, Real, Tensor};

/// Optimizer group a parameter belongs to. The staged finetuning schedule
/// assigns learning rates per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    ImaginationEncoder,
    TypeEmbedding,
    Base,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] =
        [ParamGroup::ImaginationEncoder, ParamGroup::TypeEmbedding, ParamGroup::Base];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::ImaginationEncoder => "imagination_encoder",
            ParamGroup::TypeEmbedding => "type_embedding",
            ParamGroup::Base => "base",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = NumError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| NumError::Contract(format!("unknown parameter group `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

/// Named parameter arrays, each tagged with exactly one group.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Tensor<T>) -> Result<ParamId, NumError> {
        if self.index.contains_key(name) {
            return Err(NumError::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_owned(),
            group,
            value,
            grad: None,
            requires_grad: true,
        });
        self.index.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.value.rows(), p.value.cols()));
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the parameter's gradient, creating it if absent.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<(), NumError> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.value.shape() {
            return Err(NumError::Shape(format!(
                "gradient {:?} does not match parameter `{}` {:?}",
                grad.shape(),
                p.name,
                p.value.shape()
            )));
        }
        match &mut p.grad {
            Some(g) => super::kernels::add_assign(g.data_mut(), grad.data()),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    requires_grad: p.requires_grad,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
