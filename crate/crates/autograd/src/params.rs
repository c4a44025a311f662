use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::AutogradError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, AutogradError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutogradError::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value.as_standard_layout().into_owned());
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Replace a tensor's contents, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), AutogradError> {
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(AutogradError::ShapeMismatch {
                name: self.names[id.0].clone(),
                expected: slot.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        *slot = value.as_standard_layout().into_owned();
        Ok(())
    }

    /// Load every tensor by name from `other`; names and shapes must match exactly.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), AutogradError> {
        if let Some(missing) = self.names.iter().find(|n| other.id(n).is_none()) {
            return Err(AutogradError::MissingParam(missing.clone()));
        }
        for (_, name, value) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| AutogradError::UnknownParam(name.to_string()))?;
            self.set(id, value.clone())?;
        }
        Ok(())
    }
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_shape_vec(IxDyn(shape), data).expect("shape")
}

/// Normal(0, std) resampled to lie within two standard deviations.
pub fn trunc_normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break std * z;
            }
        })
        .collect();
    Tensor::from_shape_vec(IxDyn(shape), data).expect("shape")
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Sum of squared entries over all gradients.
    pub fn sq_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }
}

/// A graph bound to a parameter store. Parameters enter the graph lazily,
/// once each, the first time a layer asks for them.
pub struct Session<'p> {
    graph: Graph,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Session<'p> {
    /// Session whose parameters receive gradients.
    pub fn train(params: &'p ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
            trainable: true,
        }
    }

    /// Session with all parameters treated as constants.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::train(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.trainable {
            self.graph.variable(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.graph.constant(value)
    }

    /// Backpropagate from a scalar loss and collect parameter gradients.
    /// Parameters that did not take part in the forward pass get `None`.
    pub fn param_grads(&self, loss: Var) -> ParamGrads {
        let mut all = self.graph.backward(loss);
        let grads = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| all.take(v)))
            .collect();
        ParamGrads { grads }
    }
}

impl Deref for Session<'_> {
    type Target = Graph;

    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}
