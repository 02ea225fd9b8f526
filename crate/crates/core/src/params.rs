//! Named parameter storage with group labels.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Which network a parameter belongs to. The first three make up θ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    ContentEncoder,
    StyleEncoder,
    Decoder,
    Scorer,
}

impl Group {
    pub fn label(self) -> &'static str {
        match self {
            Group::ContentEncoder => "encc",
            Group::StyleEncoder => "encs",
            Group::Decoder => "dec",
            Group::Scorer => "sc",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Some(match s {
            "encc" => Group::ContentEncoder,
            "encs" => Group::StyleEncoder,
            "dec" => Group::Decoder,
            "sc" => Group::Scorer,
            _ => return None,
        })
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    /// Updated by the optimizer. Non-trainable entries (the EMA codebook)
    /// enter the graph as constants.
    pub trainable: bool,
    pub value: Tensor,
}

impl Param {
    /// `group/name`, the key used in checkpoints.
    pub fn key(&self) -> String {
        format!("{}/{}", self.group, self.name)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Graph handles for every entry of a [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles already on a graph, one per parameter in id order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            trainable: true,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn normal(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std is finite");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.push(name, group, Tensor::new(shape, data).expect("shape"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, group: Group, shape: &[usize]) -> ParamId {
        self.push(name, group, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.params[id.0].trainable)
            .collect()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on `g`. With `learn == false` all of them are
    /// constants (frozen encoders, inference).
    pub fn bind(&self, g: &mut Graph, learn: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if learn && p.trainable {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients of the trainable entries, in `trainable_ids` order.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        self.trainable_ids()
            .into_iter()
            .map(|id| grads.get(bound.var(id)))
            .collect()
    }

    /// Mutable references to trainable values, in `trainable_ids` order.
    pub fn trainable_values_mut(&mut self) -> Vec<&mut Tensor> {
        self.params
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| &mut p.value)
            .collect()
    }

    pub fn trainable_values(&self) -> Vec<&Tensor> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| &p.value)
            .collect()
    }
}

/// Global L2 norm over a list of tensors, treated as one flat vector.
pub fn global_norm(ts: &[Tensor]) -> f64 {
    ts.iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}
