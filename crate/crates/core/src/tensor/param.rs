use std::sync::Arc;

use super::{Graph, Scalar, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Trainable tensor plus its SGD momentum buffer.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    /// Dotted path, e.g. `stage1.block0.conv1.weight`.
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub momentum: Tensor<T>,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Ordered collection of parameters. Order is stable and defines the
/// checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let momentum = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name: name.into(),
            value: Arc::new(value),
            momentum,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records the parameter as a leaf of `graph`, sharing its storage.
    pub fn leaf<'g>(&self, graph: &'g Graph<T>, id: ParamId, trainable: bool) -> Var<'g, T> {
        graph.leaf(self.params[id.0].value.clone(), trainable)
    }

    /// Same weights, element type converted.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    momentum: p.momentum.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }
}

/// Parameters placed on a graph during one forward pass, so their
/// gradients can be collected afterwards.
pub struct Binder<'g, 's, T: Scalar> {
    graph: &'g Graph<T>,
    store: &'s ParamStore<T>,
    trainable: bool,
    bound: Vec<(ParamId, Var<'g, T>)>,
}

impl<'g, 's, T: Scalar> Binder<'g, 's, T> {
    pub fn new(graph: &'g Graph<T>, store: &'s ParamStore<T>, trainable: bool) -> Self {
        Binder {
            graph,
            store,
            trainable,
            bound: Vec::new(),
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn bind(&mut self, id: ParamId) -> Var<'g, T> {
        let v = self.store.leaf(self.graph, id, self.trainable);
        if self.trainable {
            self.bound.push((id, v));
        }
        v
    }

    pub fn finish(self) -> BoundParams<'g, T> {
        BoundParams { bound: self.bound }
    }
}

/// Parameter leaves recorded by a [`Binder`].
pub struct BoundParams<'g, T: Scalar> {
    bound: Vec<(ParamId, Var<'g, T>)>,
}

impl<'g, T: Scalar> BoundParams<'g, T> {
    pub fn empty() -> Self {
        BoundParams { bound: Vec::new() }
    }

    pub fn vars(&self) -> &[(ParamId, Var<'g, T>)] {
        &self.bound
    }

    /// Gradients after backward, summed per parameter (a parameter may be
    /// bound more than once) and ordered by id. Parameters that received
    /// no gradient are omitted.
    pub fn grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for &(id, var) in &self.bound {
            let Some(grad) = var.graph().take_grad(var) else {
                continue;
            };
            match out.iter_mut().find(|(i, _)| *i == id) {
                Some((_, acc)) => acc.add_assign(&grad),
                None => out.push((id, grad)),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
