use super::{Graph, Tensor, Var};

/// Index of a parameter within a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors, kept off-graph between steps.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `graph` as a gradient-tracking leaf.
    /// The returned handles are indexed by [`ParamId`].
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| graph.param(t.clone())).collect()
    }

    /// Places every parameter on `graph` as a constant.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| graph.constant(t.clone())).collect()
    }

    /// Gradients for handles returned by [`ParamSet::bind`]; parameters the
    /// backward pass never reached get zeros.
    pub fn gradients(&self, graph: &Graph, vars: &[Var]) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| graph.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}
