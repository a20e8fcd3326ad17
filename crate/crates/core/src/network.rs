//! Layered perceptron: shape, weights, the full optimization path and the
//! forward map `x(l) = f(W(l) x(l-1))` (no bias).
//!
//! Layers are indexed from 0 (input) to `n_layers - 1` (output).

use serde::{Deserialize, Serialize};

use crate::error::{ensure, ensure_finite, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Tanh,
    Identity,
    Logistic,
}

impl ActivationKind {
    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            ActivationKind::Tanh => a.tanh(),
            ActivationKind::Identity => a,
            ActivationKind::Logistic => 1.0 / (1.0 + (-a).exp()),
        }
    }

    /// Value and derivative with respect to the pre-activation.
    #[inline]
    pub fn apply_with_slope(self, a: f64) -> (f64, f64) {
        match self {
            ActivationKind::Tanh => {
                let t = a.tanh();
                (t, 1.0 - t * t)
            }
            ActivationKind::Identity => (a, 1.0),
            ActivationKind::Logistic => {
                let s = 1.0 / (1.0 + (-a).exp());
                (s, s * (1.0 - s))
            }
        }
    }

    /// Closed range the activity can occupy; `None` when unbounded.
    pub fn range(self) -> Option<(f64, f64)> {
        match self {
            ActivationKind::Tanh => Some((-1.0, 1.0)),
            ActivationKind::Identity => None,
            ActivationKind::Logistic => Some((0.0, 1.0)),
        }
    }
}

impl Default for ActivationKind {
    fn default() -> Self {
        ActivationKind::Tanh
    }
}

/// Geometry of a perceptron with `n_neurons` units in each of `n_layers`
/// layers. The first `n_observed` units of the input layer and the first
/// `n_observed_out` (defaults to `n_observed`) of the output layer are the
/// ones compared with data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub n_neurons: usize,
    pub n_layers: usize,
    pub n_observed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_observed_out: Option<usize>,
    #[serde(default)]
    pub activation: ActivationKind,
}

impl NetworkShape {
    pub fn new(n_neurons: usize, n_layers: usize, n_observed: usize, activation: ActivationKind) -> Result<Self> {
        let shape = NetworkShape { n_neurons, n_layers, n_observed, n_observed_out: None, activation };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_neurons == 0 {
            return Err(Error::Config("n_neurons must be positive".into()));
        }
        if self.n_layers < 2 {
            return Err(Error::Config(format!("n_layers must be at least 2, got {}", self.n_layers)));
        }
        for (name, l) in [("n_observed", self.n_observed), ("n_observed_out", self.n_out())] {
            if l == 0 || l > self.n_neurons {
                return Err(Error::Config(format!(
                    "{name} must lie in 1..={}, got {l}",
                    self.n_neurons
                )));
            }
        }
        Ok(())
    }

    pub fn n_in(&self) -> usize {
        self.n_observed
    }

    pub fn n_out(&self) -> usize {
        self.n_observed_out.unwrap_or(self.n_observed)
    }

    pub fn output_layer(&self) -> usize {
        self.n_layers - 1
    }

    pub fn weight_len(&self) -> usize {
        self.n_neurons * self.n_neurons * (self.n_layers - 1)
    }

    /// Length of the flat path vector for `m` pairs.
    pub fn path_len(&self, m: usize) -> usize {
        m * self.n_neurons * self.n_layers + self.weight_len()
    }
}

/// One N×N matrix per layer transition, stored layer-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    n: usize,
    data: Vec<f64>,
}

impl Weights {
    pub fn zeros(shape: &NetworkShape) -> Self {
        Weights { n: shape.n_neurons, data: vec![0.0; shape.weight_len()] }
    }

    pub fn identity(shape: &NetworkShape) -> Self {
        let mut w = Self::zeros(shape);
        let n = w.n;
        for l in 0..w.n_matrices() {
            for j in 0..n {
                w.data[l * n * n + j * n + j] = 1.0;
            }
        }
        w
    }

    pub fn from_flat(shape: &NetworkShape, data: Vec<f64>) -> Result<Self> {
        ensure(data.len() == shape.weight_len(), || {
            format!("expected {} weight entries, got {}", shape.weight_len(), data.len())
        })?;
        ensure_finite(&data, "weights")?;
        Ok(Weights { n: shape.n_neurons, data })
    }

    pub fn n_neurons(&self) -> usize {
        self.n
    }

    pub fn n_matrices(&self) -> usize {
        if self.n == 0 {
            0
        } else {
            self.data.len() / (self.n * self.n)
        }
    }

    /// Row-major matrix mapping layer `l` to layer `l + 1`.
    pub fn layer(&self, l: usize) -> &[f64] {
        let nn = self.n * self.n;
        &self.data[l * nn..(l + 1) * nn]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [f64] {
        let nn = self.n * self.n;
        &mut self.data[l * nn..(l + 1) * nn]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn check_shape(&self, shape: &NetworkShape) -> Result<()> {
        ensure(self.n == shape.n_neurons && self.data.len() == shape.weight_len(), || {
            format!(
                "weights hold {} matrices of size {}, shape wants {} of size {}",
                self.n_matrices(),
                self.n,
                shape.n_layers - 1,
                shape.n_neurons
            )
        })
    }
}

/// The complete set of optimization variables: activities of every layer for
/// every pair plus the shared weights.
///
/// Flat layout: activities pair-major, then layer-major, then neuron index;
/// weights appended layer-major, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    shape: NetworkShape,
    n_pairs: usize,
    activities: Vec<f64>,
    weights: Weights,
}

impl Path {
    pub fn new(shape: NetworkShape, n_pairs: usize, activities: Vec<f64>, weights: Weights) -> Result<Self> {
        ensure(n_pairs >= 1, || "a path needs at least one pair".into())?;
        ensure(activities.len() == n_pairs * shape.n_layers * shape.n_neurons, || {
            format!("activity block has {} entries, expected {}", activities.len(), n_pairs * shape.n_layers * shape.n_neurons)
        })?;
        weights.check_shape(&shape)?;
        ensure_finite(&activities, "activities")?;
        Ok(Path { shape, n_pairs, activities, weights })
    }

    pub fn from_flat(shape: &NetworkShape, n_pairs: usize, flat: &[f64]) -> Result<Self> {
        ensure(flat.len() == shape.path_len(n_pairs), || {
            format!("flat path has length {}, expected {}", flat.len(), shape.path_len(n_pairs))
        })?;
        let split = n_pairs * shape.n_layers * shape.n_neurons;
        let weights = Weights::from_flat(shape, flat[split..].to_vec())?;
        Path::new(*shape, n_pairs, flat[..split].to_vec(), weights)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.activities.len() + self.weights.data.len());
        v.extend_from_slice(&self.activities);
        v.extend_from_slice(&self.weights.data);
        v
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Activities of pair `k` at layer `l`.
    pub fn activity(&self, k: usize, l: usize) -> &[f64] {
        let n = self.shape.n_neurons;
        let start = (k * self.shape.n_layers + l) * n;
        &self.activities[start..start + n]
    }

    pub fn activity_mut(&mut self, k: usize, l: usize) -> &mut [f64] {
        let n = self.shape.n_neurons;
        let start = (k * self.shape.n_layers + l) * n;
        &mut self.activities[start..start + n]
    }
}

/// One layer of the forward map: `f(w · x_prev)` componentwise.
pub fn forward_layer(x_prev: &[f64], w: &[f64], activation: ActivationKind) -> Result<Vec<f64>> {
    let n = x_prev.len();
    ensure(w.len() == n * n, || format!("weight matrix has {} entries, expected {n}x{n}", w.len()))?;
    ensure_finite(x_prev, "layer input")?;
    ensure_finite(w, "layer weights")?;
    Ok(apply_layer(x_prev, w, activation))
}

#[inline]
pub(crate) fn apply_layer(x_prev: &[f64], w: &[f64], activation: ActivationKind) -> Vec<f64> {
    let n = x_prev.len();
    w.chunks_exact(n)
        .map(|row| activation.apply(row.iter().zip(x_prev).map(|(a, b)| a * b).sum()))
        .collect()
}

/// Runs `input` through every layer. Returns `n_layers` activity vectors,
/// the first being `input` itself.
pub fn forward_network(input: &[f64], weights: &Weights, shape: &NetworkShape) -> Result<Vec<Vec<f64>>> {
    ensure(input.len() == shape.n_neurons, || {
        format!("input has {} components, network has {} neurons", input.len(), shape.n_neurons)
    })?;
    weights.check_shape(shape)?;
    ensure_finite(input, "network input")?;
    ensure_finite(weights.as_slice(), "weights")?;
    let mut layers = Vec::with_capacity(shape.n_layers);
    layers.push(input.to_vec());
    for l in 0..shape.n_layers - 1 {
        let next = apply_layer(&layers[l], weights.layer(l), shape.activation);
        layers.push(next);
    }
    Ok(layers)
}

/// A single observed input/output pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPair {
    pub input: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMetadata {
    pub teacher_seed: u64,
    pub library_seed: u64,
    pub teacher_neurons: usize,
    pub teacher_layers: usize,
    pub teacher_activation: Option<ActivationKind>,
    pub weight_scale: f64,
    pub input_range: (f64, f64),
    pub noise_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataLibrary {
    pub pairs: Vec<DataPair>,
    pub noise_variance: f64,
    pub metadata: GeneratorMetadata,
}

impl DataLibrary {
    pub fn new(pairs: Vec<DataPair>, noise_variance: f64, metadata: GeneratorMetadata) -> Result<Self> {
        let lib = DataLibrary { pairs, noise_variance, metadata };
        lib.validate()?;
        Ok(lib)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.pairs.first().ok_or_else(|| Error::Input("data library is empty".into()))?;
        let (li, lo) = (first.input.len(), first.output.len());
        for (k, p) in self.pairs.iter().enumerate() {
            ensure(p.input.len() == li && p.output.len() == lo, || {
                format!("pair {k} has dimensions ({}, {}), expected ({li}, {lo})", p.input.len(), p.output.len())
            })?;
            ensure_finite(&p.input, "library input")?;
            ensure_finite(&p.output, "library output")?;
        }
        if !(self.noise_variance >= 0.0) {
            return Err(Error::Input(format!("noise variance {} is negative", self.noise_variance)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.pairs.first().map_or(0, |p| p.input.len())
    }

    pub fn output_dim(&self) -> usize {
        self.pairs.first().map_or(0, |p| p.output.len())
    }

    /// First `m` pairs as a new library.
    pub fn take(&self, m: usize) -> Result<Self> {
        ensure(m >= 1 && m <= self.len(), || format!("cannot take {m} pairs from a library of {}", self.len()))?;
        Ok(DataLibrary { pairs: self.pairs[..m].to_vec(), noise_variance: self.noise_variance, metadata: self.metadata.clone() })
    }

    pub(crate) fn check_against(&self, shape: &NetworkShape) -> Result<()> {
        self.validate()?;
        ensure(self.input_dim() == shape.n_in() && self.output_dim() == shape.n_out(), || {
            format!(
                "library observes ({}, {}) components, shape expects ({}, {})",
                self.input_dim(),
                self.output_dim(),
                shape.n_in(),
                shape.n_out()
            )
        })
    }
}
