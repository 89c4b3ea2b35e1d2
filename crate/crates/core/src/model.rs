//! Multilayer perceptron classifiers with softmax cross-entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{log_softmax, Activation, Gradients, Graph, NodeId, Real, Tensor};

/// Architecture of a dense classifier: `widths = [d, hidden..., C]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, init_seed: u64) -> Result<Self> {
        let spec = ModelSpec {
            widths,
            activation,
            init_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Argument(
                "model needs at least an input and an output width".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::Argument(format!(
                "layer widths must be >= 1, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// One dense layer; `weight` is `[fan_in, fan_out]`, `bias` is `[fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Layer<T> {
    pub fn zeros_like(&self) -> Self {
        Layer {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn aligned(&self, other: &Layer<T>) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.shape() == other.bias.shape()
    }

    /// Squared l2 norm over weight and bias together.
    pub fn sq_norm(&self) -> T {
        self.weight.sq_norm() + self.bias.sq_norm()
    }

    pub fn norm(&self) -> T {
        self.sq_norm().sqrt()
    }

    pub fn scale(&self, s: T) -> Self {
        Layer {
            weight: self.weight.scale(s),
            bias: self.bias.scale(s),
        }
    }

    pub fn axpy(&mut self, alpha: T, other: &Layer<T>) -> Result<()> {
        self.weight.axpy(alpha, &other.weight)?;
        self.bias.axpy(alpha, &other.bias)
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.weight.data().iter().chain(self.bias.data())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weight
            .data_mut()
            .iter_mut()
            .chain(self.bias.data_mut().iter_mut())
    }

    pub fn all_finite(&self) -> bool {
        self.weight.all_finite() && self.bias.all_finite()
    }
}

pub(crate) fn check_aligned<T: Real>(
    a: &[Layer<T>],
    b: &[Layer<T>],
    op: &'static str,
) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| !x.aligned(y)) {
        return Err(Error::shape(op, "layer structures differ"));
    }
    Ok(())
}

/// Parameters of an MLP together with its hidden activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub activation: Activation,
    pub layers: Vec<Layer<T>>,
}

/// Gradient with the same layer structure as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn add(&mut self, other: &ParamGrads<T>) -> Result<()> {
        check_aligned(&self.layers, &other.layers, "grad_add")?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(T::one(), b)?;
        }
        Ok(())
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(Layer::values)
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Layer::all_finite)
    }
}

/// Graph node handles for the parameters of one model copy.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    nodes: Vec<(NodeId, NodeId)>,
}

impl ParamNodes {
    /// Reads back the parameter gradients, zero-filling unreached layers.
    pub fn gradients<T: Real>(
        &self,
        grads: &mut Gradients<T>,
        like: &ModelParams<T>,
    ) -> ParamGrads<T> {
        ParamGrads {
            layers: self
                .nodes
                .iter()
                .zip(&like.layers)
                .map(|(&(w, b), layer)| Layer {
                    weight: grads.take_or_zeros(w, layer.weight.shape()),
                    bias: grads.take_or_zeros(b, layer.bias.shape()),
                })
                .collect(),
        }
    }
}

/// A batch of inputs in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> LabeledBatch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::shape(
                "batch",
                format!("inputs {:?} with {} labels", inputs.shape(), labels.len()),
            ));
        }
        if let Some(v) = inputs
            .data()
            .iter()
            .find(|v| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::Argument(format!("batch input {v} outside [0, 1]")));
        }
        Ok(LabeledBatch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
}

/// `-log softmax(logits)[y]`
pub fn cross_entropy<T: Real>(logits: &[T], y: usize) -> Result<T> {
    if logits.len() < 2 || y >= logits.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("label {y} with {} logits", logits.len()),
        ));
    }
    Ok(-log_softmax(logits)[y])
}

fn as_matrix<T: Real>(x: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    match x.shape() {
        [n] if *n == d => x.clone().reshape(vec![1, d]),
        [_, n] if *n == d => Ok(x.clone()),
        other => Err(Error::shape(
            "forward",
            format!("input {other:?} for input width {d}"),
        )),
    }
}

impl<T: Real> ModelParams<T> {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation for weights and biases.
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |n: usize| -> Vec<T> {
                    (0..n)
                        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
                        .collect()
                };
                let weight = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out))?;
                let bias = Tensor::new(vec![fan_out], draw(fan_out))?;
                Ok(Layer { weight, bias })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            activation: spec.activation,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").weight.shape()[1]
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.shape()[1]));
        w
    }

    pub fn zeros_like(&self) -> ParamGrads<T> {
        ParamGrads {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(Layer::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers.iter_mut().flat_map(Layer::values_mut)
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Layer::all_finite)
    }

    /// Registers every weight and bias as a graph input.
    pub fn record(&self, g: &mut Graph<T>) -> ParamNodes {
        ParamNodes {
            nodes: self
                .layers
                .iter()
                .map(|l| (g.input(l.weight.clone()), g.input(l.bias.clone())))
                .collect(),
        }
    }

    /// Logits for an `m x d` batch (or a single `d` vector) as `m x C`.
    pub fn forward_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = as_matrix(x, self.input_dim())?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weight)?;
            let b = layer.bias.data();
            for r in 0..z.rows() {
                for (v, &bb) in z.row_mut(r).iter_mut().zip(b) {
                    *v += bb;
                }
            }
            if i != last {
                let act = self.activation;
                z.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(predict_rows(&self.forward_logits(x)?))
    }

    /// Per-instance cross-entropy.
    pub fn losses(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
        let logits = self.forward_logits(x)?;
        if logits.rows() != labels.len() {
            return Err(Error::shape(
                "losses",
                format!("{} rows, {} labels", logits.rows(), labels.len()),
            ));
        }
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| cross_entropy(logits.row(i), y))
            .collect()
    }

    pub fn mean_loss(&self, x: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let l = self.losses(x, labels)?;
        Ok(l.iter().copied().sum::<T>() / T::lit(l.len() as f64))
    }

    /// Gradient of each instance's own loss with respect to its input row.
    pub fn input_gradient(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        let xm = as_matrix(x, self.input_dim())?;
        let mut g = Graph::new();
        let nodes = self.record(&mut g);
        let xi = g.input(xm);
        let logits = forward_graph(&mut g, &nodes, self.activation, xi)?;
        let ce = g.cross_entropy_rows(logits, labels)?;
        let total = g.sum(ce);
        let mut grads = g.backward(total, Tensor::scalar(T::one()))?;
        let out = grads.take_or_zeros(xi, g.value(xi).shape());
        out.reshape(x.shape().to_vec())
    }

    /// Mean cross-entropy over the batch and its parameter gradient.
    pub fn param_gradient(&self, batch: &LabeledBatch<T>) -> Result<(T, ParamGrads<T>)> {
        let mut g = Graph::new();
        let nodes = self.record(&mut g);
        let xi = g.input(batch.inputs.clone());
        let logits = forward_graph(&mut g, &nodes, self.activation, xi)?;
        let ce = g.cross_entropy_rows(logits, &batch.labels)?;
        let loss = g.mean(ce);
        let value = g.value(loss).item();
        let mut grads = g.backward(loss, Tensor::scalar(T::one()))?;
        Ok((value, nodes.gradients(&mut grads, self)))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            activation: self.activation,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}

/// Records the forward pass of an MLP whose parameters are already on the tape.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    params: &ParamNodes,
    activation: Activation,
    x: NodeId,
) -> Result<NodeId> {
    let mut h = x;
    let last = params.nodes.len() - 1;
    for (i, &(w, b)) in params.nodes.iter().enumerate() {
        let z = g.matmul(h, w)?;
        let z = g.add_bias(z, b)?;
        h = if i == last {
            z
        } else {
            g.activate(z, activation)
        };
    }
    Ok(h)
}
