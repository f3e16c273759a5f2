//! Fully connected classifier networks.
//!
//! Hidden layers use the logistic sigmoid, the output layer is the identity and
//! the softmax lives inside the cross-entropy loss. Every layer's weight matrix
//! has shape `(n_out, n_in + 1)` with column 0 holding the bias, and all layers
//! are stored back to back in one row-major parameter vector.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer widths from input to class count.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct NetworkTopology {
    layer_sizes: Vec<usize>,
}

impl NetworkTopology {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidTopology(format!(
                "need at least an input and an output layer, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.iter().any(|&w| w == 0) {
            return Err(Error::InvalidTopology(format!(
                "layer widths must be positive, got {layer_sizes:?}"
            )));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().expect("validated topology")
    }

    /// Number of weight layers (connections), one less than the number of widths.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Shape `(rows, cols)` of weight layer `l`, bias column included.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l + 1], self.layer_sizes[l] + 1)
    }

    /// Offset of weight layer `l` inside the packed parameter vector.
    pub fn layer_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|j| {
                let (r, c) = self.layer_shape(j);
                r * c
            })
            .sum()
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(self)
    }
}

impl TryFrom<Vec<usize>> for NetworkTopology {
    type Error = Error;

    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        Self::new(sizes)
    }
}

impl From<NetworkTopology> for Vec<usize> {
    fn from(t: NetworkTopology) -> Self {
        t.layer_sizes
    }
}

impl fmt::Display for NetworkTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, w) in self.layer_sizes.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{w}")?;
        }
        write!(f, "]")
    }
}

impl std::str::FromStr for NetworkTopology {
    type Err = Error;

    /// Parses comma separated widths such as `11,5,3` (brackets optional).
    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim().trim_start_matches('[').trim_end_matches(']');
        let sizes = trimmed
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidTopology(format!("cannot parse width {p:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sizes)
    }
}

/// Total number of weights including biases: `Σ (n_{l-1} + 1) · n_l`.
pub fn parameter_count(topology: &NetworkTopology) -> usize {
    topology
        .layer_sizes
        .windows(2)
        .map(|w| (w[0] + 1) * w[1])
        .sum()
}

/// A network with its parameters packed layer by layer, each layer row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    topology: NetworkTopology,
    params: Vec<f64>,
}

impl Network {
    /// Glorot-uniform weights, zero biases, deterministic in `seed`.
    pub fn init(topology: NetworkTopology, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(topology.parameter_count());
        for l in 0..topology.depth() {
            let (rows, cols) = topology.layer_shape(l);
            let fan_in = topology.layer_sizes[l] as f64;
            let fan_out = topology.layer_sizes[l + 1] as f64;
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            for _ in 0..rows {
                params.push(0.0);
                for _ in 1..cols {
                    params.push(rng.random_range(-limit..=limit));
                }
            }
        }
        Self { topology, params }
    }

    pub fn zeros(topology: NetworkTopology) -> Self {
        let params = vec![0.0; topology.parameter_count()];
        Self { topology, params }
    }

    pub fn from_parameters(topology: NetworkTopology, params: Vec<f64>) -> Result<Self> {
        let expected = topology.parameter_count();
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(Self { topology, params })
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topology
    }

    /// The packed parameter vector θ.
    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn into_parameters(self) -> Vec<f64> {
        self.params
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Row-major weights of layer `l`, bias in column 0.
    pub fn layer_weights(&self, l: usize) -> &[f64] {
        let (r, c) = self.topology.layer_shape(l);
        let off = self.topology.layer_offset(l);
        &self.params[off..off + r * c]
    }

    pub fn layer_weights_mut(&mut self, l: usize) -> &mut [f64] {
        let (r, c) = self.topology.layer_shape(l);
        let off = self.topology.layer_offset(l);
        &mut self.params[off..off + r * c]
    }

    /// Weight `(i, k)` of layer `l`; `k == 0` is the bias.
    pub fn weight(&self, l: usize, i: usize, k: usize) -> f64 {
        let (_, c) = self.topology.layer_shape(l);
        self.layer_weights(l)[i * c + k]
    }

    pub fn forward(&self, features: &[f64]) -> Result<ForwardTrace> {
        forward(self, features)
    }

    /// Output scores `a_L` without keeping the intermediate trace.
    pub fn scores(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(forward(self, features)?.activations.pop().expect("non-empty trace"))
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            layer_sizes: self.topology.layer_sizes.clone(),
            parameters: self.params.clone(),
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        if doc.format != MODEL_FORMAT {
            return Err(Error::ModelFormat(format!("unknown format {:?}", doc.format)));
        }
        if doc.version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {}", doc.version)));
        }
        let topology = NetworkTopology::new(doc.layer_sizes)?;
        Self::from_parameters(topology, doc.parameters)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("model document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub const MODEL_FORMAT: &str = "ice-mlp/network";
pub const MODEL_VERSION: u32 = 1;

/// On-disk model representation. Floats are written in shortest round-trip form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub parameters: Vec<f64>,
}

/// One observation: a feature vector and a class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl LabeledSample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }

    pub fn one_hot(&self, classes: usize) -> Vec<f64> {
        let mut y = vec![0.0; classes];
        y[self.label] = 1.0;
        y
    }
}

/// Per-layer quantities of one forward evaluation.
///
/// `activations[0]` is the input and `activations[l + 1]` the output of weight
/// layer `l`. `first_derivs[l]` and `second_derivs[l]` hold `f'` and `f''` of
/// weight layer `l` evaluated at its pre-activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub activations: Vec<Vec<f64>>,
    pub first_derivs: Vec<Vec<f64>>,
    pub second_derivs: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn scores(&self) -> &[f64] {
        self.activations.last().expect("non-empty trace")
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn forward(network: &Network, features: &[f64]) -> Result<ForwardTrace> {
    let topo = &network.topology;
    if features.len() != topo.input_width() {
        return Err(Error::DimensionMismatch {
            what: "feature vector",
            expected: topo.input_width(),
            got: features.len(),
        });
    }
    let depth = topo.depth();
    let mut activations = Vec::with_capacity(depth + 1);
    let mut first_derivs = Vec::with_capacity(depth);
    let mut second_derivs = Vec::with_capacity(depth);
    activations.push(features.to_vec());

    for l in 0..depth {
        let (rows, cols) = topo.layer_shape(l);
        let w = network.layer_weights(l);
        let input = &activations[l];
        let is_output = l + 1 == depth;
        let mut out = Vec::with_capacity(rows);
        let mut d1 = Vec::with_capacity(rows);
        let mut d2 = Vec::with_capacity(rows);
        for row in w.chunks_exact(cols) {
            let z = row[0] + row[1..].iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            if is_output {
                out.push(z);
                d1.push(1.0);
                d2.push(0.0);
            } else {
                let s = sigmoid(z);
                let ds = s * (1.0 - s);
                out.push(s);
                d1.push(ds);
                d2.push(ds * (1.0 - 2.0 * s));
            }
        }
        debug_assert_eq!(out.len(), rows);
        activations.push(out);
        first_derivs.push(d1);
        second_derivs.push(d2);
    }

    Ok(ForwardTrace {
        activations,
        first_derivs,
        second_derivs,
    })
}

/// Softmax with the maximum score subtracted before exponentiation.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// `-ln softmax(scores)[label]`, evaluated as log-sum-exp minus the label score.
pub fn cross_entropy(label: usize, scores: &[f64]) -> f64 {
    let (arg_max, max) = scores
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, s)| if s > acc.1 { (i, s) } else { acc });
    let rest: f64 = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg_max)
        .map(|(_, s)| (s - max).exp())
        .sum();
    let loss = (max - scores[label]) + rest.ln_1p();
    loss.max(0.0)
}

/// Gradient `p - y` and Hessian diagonal `p (1 - p)` of the cross-entropy with
/// respect to the output scores.
pub fn loss_output_derivs(label: usize, scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let probs = softmax(scores);
    let grad = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == label { p - 1.0 } else { p })
        .collect();
    let hess = probs.iter().map(|&p| p * (1.0 - p)).collect();
    (grad, hess)
}
