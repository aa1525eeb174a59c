//! Central parameter and gradient storage.

use ndarray::ArrayD;

/// Handle into a [`ParamStore`]. Ids are only meaningful for the store that
/// issued them.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Owns every tensor of a model assembly.
#[derive(Default, Clone)]
pub struct ParamStore {
    values: Vec<ArrayD<f32>>,
    metas: Vec<ParamMeta>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f32>, trainable: bool) -> ParamId {
        let meta = ParamMeta {
            name: name.into(),
            shape: value.shape().to_vec(),
            trainable,
        };
        self.values.push(value);
        self.metas.push(meta);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.values[id.0]
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.metas[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.metas[id.0].trainable = trainable;
    }

    /// All ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`, in insertion order.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |id| self.metas[id.0].name.starts_with(prefix))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.metas.iter().position(|m| m.name == name).map(ParamId)
    }
}

/// Gradient accumulator parallel to a [`ParamStore`].
///
/// Entries start empty; `accumulate` sums into them so a parameter touched by
/// several loss paths ends up with the total gradient.
pub struct GradStore {
    grads: Vec<Option<ArrayD<f32>>>,
}

impl GradStore {
    pub fn zeroed(store: &ParamStore) -> Self {
        Self {
            grads: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: ArrayD<f32>) {
        match &mut self.grads[id.index()] {
            Some(g) => *g += &grad,
            slot @ None => *slot = Some(grad),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.grads[id.index()].as_ref()
    }

    /// Replace the pending gradient, discarding anything accumulated.
    pub fn set(&mut self, id: ParamId, grad: ArrayD<f32>) {
        self.grads[id.index()] = Some(grad);
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }
}
