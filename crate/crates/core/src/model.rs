//! Feed-forward ReLU classifier with hand-written reverse-mode gradients.
//!
//! The network maps `x ∈ R^d` to raw logits `z ∈ R^K` through affine layers
//! with ReLU between them. The ReLU derivative at exactly zero is taken as 0.
//! The training loss is softmax cross-entropy, computed with max-subtraction.

use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One affine layer: `weights` is `[out × in]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    fn zeros_like(&self) -> Layer {
        Layer {
            weights: Tensor::zeros(self.weights.shape().to_vec()),
            bias: Tensor::zeros(self.bias.shape().to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

/// Gradients with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn zeros_like(model: &MlpModel) -> Self {
        ParamGrads {
            layers: model.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    fn accumulate(&mut self, other: &ParamGrads, k: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += k * y;
            }
            for (x, y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
                *x += k * y;
            }
        }
    }

    /// All gradient entries, layer by layer, weights before bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.data().iter().chain(l.bias.data()).copied())
            .collect()
    }

    pub fn norm_l2(&self) -> f64 {
        crate::tensor::norm_l2(&self.flatten())
    }
}

/// Inputs `[n × d]` with one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    inputs: Tensor,
    labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = match inputs.shape() {
            [n, _] => *n,
            s => return Err(Error::shape("[n, d]", format!("{s:?}"))),
        };
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if labels.len() != n {
            return Err(Error::shape(format!("{n} labels"), labels.len()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(LabeledBatch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.inputs.row(i), self.labels[i])
    }
}

/// Pre-activations of every layer, kept for the backward pass.
struct Trace {
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpModel {
    /// Wraps layers after checking that consecutive dimensions chain.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weights.shape().len() != 2 || layer.bias.shape() != [layer.outputs()] {
                return Err(Error::shape(
                    format!("layer {i}: weights [out, in] and bias [out]"),
                    format!("{:?} / {:?}", layer.weights.shape(), layer.bias.shape()),
                ));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(
                    format!("layer {} input = {}", i + 1, pair[0].outputs()),
                    pair[1].inputs(),
                ));
            }
        }
        Ok(MlpModel { layers })
    }

    /// Weights and biases drawn from `U(±1/√fan_in)`.
    pub fn init(sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
                let bias = (0..fan_out).map(|_| dist.sample(rng)).collect();
                Layer {
                    weights: Tensor::from_parts_unchecked(vec![fan_out, fan_in], data),
                    bias: Tensor::from_parts_unchecked(vec![fan_out], bias),
                }
            })
            .collect();
        MlpModel::new(layers)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        MlpModel::new(
            sizes
                .windows(2)
                .map(|w| Layer {
                    weights: Tensor::zeros(vec![w[1], w[0]]),
                    bias: Tensor::zeros(vec![w[1]]),
                })
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(Layer::outputs).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.is_finite())
    }

    /// Logits for one input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.data())?;
        if !x.is_finite() {
            return Err(Error::NonFinite("model input"));
        }
        Ok(Tensor::from_parts_unchecked(
            vec![self.num_classes()],
            self.logits(x.data()),
        ))
    }

    /// Unchecked forward pass on a slice of length `input_dim`.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine(layer, &a);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut activations = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, activations.last().expect("nonempty"));
            if i < last {
                activations.push(z.iter().map(|v| v.max(0.0)).collect());
            }
            pre.push(z);
        }
        Trace { activations, pre }
    }

    /// Backpropagates `dlogits` through the recorded trace. Parameter
    /// gradients are added into `params` scaled by `k`; the input gradient is
    /// returned when requested.
    fn backward(
        &self,
        trace: &Trace,
        dlogits: Vec<f64>,
        mut params: Option<(&mut ParamGrads, f64)>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let mut delta = dlogits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[i];
            let (n_out, n_in) = (layer.outputs(), layer.inputs());
            if let Some((grads, k)) = params.as_mut() {
                let g = &mut grads.layers[i];
                let gw = g.weights.data_mut();
                for o in 0..n_out {
                    let d = *k * delta[o];
                    if d != 0.0 {
                        let row = &mut gw[o * n_in..(o + 1) * n_in];
                        for (w, a) in row.iter_mut().zip(input) {
                            *w += d * a;
                        }
                    }
                }
                for (b, d) in g.bias.data_mut().iter_mut().zip(&delta) {
                    *b += *k * d;
                }
            }
            if i == 0 && !want_input {
                return None;
            }
            let w = layer.weights.data();
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    for (p, wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += d * wv;
                    }
                }
            }
            if i > 0 {
                for (p, z) in prev.iter_mut().zip(&trace.pre[i - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Some(delta)
    }

    /// Cross-entropy loss and its input gradient for one sample.
    pub fn loss_and_input_grad(&self, x: &[f64], y: usize) -> (f64, Vec<f64>) {
        let trace = self.trace(x);
        let z = trace.pre.last().expect("nonempty");
        let loss = cross_entropy_unchecked(z, y);
        let dz = softmax_minus_onehot(z, y);
        let g = self.backward(&trace, dz, None, true).expect("input grad");
        (loss, g)
    }

    /// Loss, margin and an ascent direction for the loss at `x`.
    ///
    /// The direction is `∇_x (LSE_{j≠y} z_j − z_y)`. The cross-entropy
    /// gradient equals this vector times `1 − p_y > 0`, so both have the same
    /// sign pattern and normalized direction, but this form does not underflow
    /// to zero on confidently classified inputs.
    pub fn loss_ascent(&self, x: &[f64], y: usize) -> LossAscent {
        let trace = self.trace(x);
        let z = trace.pre.last().expect("nonempty");
        let margin = margin_unchecked(z, y);
        let dz = margin_grad(z, y);
        let direction = self.backward(&trace, dz, None, true).expect("input grad");
        LossAscent {
            loss: softplus(margin),
            margin,
            direction,
        }
    }

    /// Backpropagates an arbitrary logit-space gradient to the input.
    pub fn input_vjp(&self, x: &[f64], dlogits: impl FnOnce(&[f64]) -> Vec<f64>) -> (Vec<f64>, Vec<f64>) {
        let trace = self.trace(x);
        let z = trace.pre.last().expect("nonempty").clone();
        let dz = dlogits(&z);
        let g = self.backward(&trace, dz, None, true).expect("input grad");
        (z, g)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!("input of length {}", self.input_dim()), x.len()));
        }
        Ok(())
    }

    /// Adds `k * grads` to the parameters.
    pub fn add_scaled(&mut self, grads: &ParamGrads, k: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, d) in l.weights.data_mut().iter_mut().zip(g.weights.data()) {
                *w += k * d;
            }
            for (b, d) in l.bias.data_mut().iter_mut().zip(g.bias.data()) {
                *b += k * d;
            }
        }
    }
}

/// Output of [`MlpModel::loss_ascent`].
#[derive(Debug, Clone)]
pub struct LossAscent {
    pub loss: f64,
    pub margin: f64,
    pub direction: Vec<f64>,
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer sizes must have at least two positive entries, got {sizes:?}"
        )));
    }
    Ok(())
}

fn affine(layer: &Layer, a: &[f64]) -> Vec<f64> {
    let n_in = layer.inputs();
    layer
        .weights
        .data()
        .chunks(n_in)
        .zip(layer.bias.data())
        .map(|(row, b)| b + crate::tensor::dot(row, a))
        .collect()
}

/// Index of the first maximal entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^m)` without overflow.
pub fn softplus(m: f64) -> f64 {
    if m > 0.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

/// `LSE_{j≠y} z_j − z_y`; positive exactly when some other class outscores `y`
/// by enough to make cross-entropy exceed `ln 2`.
fn margin_unchecked(z: &[f64], y: usize) -> f64 {
    log_sum_exp(z.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| *v)) - z[y]
}

fn margin_grad(z: &[f64], y: usize) -> Vec<f64> {
    let m = z
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != y)
        .fold(f64::NEG_INFINITY, |a, (_, v)| a.max(*v));
    let mut g: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(j, v)| if j == y { 0.0 } else { (v - m).exp() })
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g[y] = -1.0;
    g
}

pub(crate) fn cross_entropy_unchecked(z: &[f64], y: usize) -> f64 {
    (log_sum_exp(z.iter().copied()) - z[y]).max(0.0)
}

pub(crate) fn softmax_minus_onehot(z: &[f64], y: usize) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let mut g: Vec<f64> = e.iter().map(|v| v / s).collect();
    // p_y − 1 written as −Σ_{j≠y} p_j to avoid cancellation.
    g[y] = -g
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != y)
        .map(|(_, v)| *v)
        .sum::<f64>();
    g
}

/// Softmax cross-entropy `−ln softmax(z)_y`.
pub fn cross_entropy(logits: &Tensor, y: usize) -> Result<f64> {
    let z = logits.data();
    if z.len() < 2 {
        return Err(Error::InvalidArgument("cross-entropy needs at least two classes".into()));
    }
    if y >= z.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: z.len(),
        });
    }
    Ok(cross_entropy_unchecked(z, y))
}

/// Mean cross-entropy over the batch and its parameter gradient.
///
/// Per-sample gradients are computed in parallel and summed in sample order,
/// so the result is independent of the thread count.
pub fn grad_params(model: &MlpModel, batch: &LabeledBatch) -> Result<(f64, ParamGrads)> {
    check_batch(model, batch)?;
    let per_sample: Vec<(f64, ParamGrads)> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = batch.sample(i);
            let trace = model.trace(x);
            let z = trace.pre.last().expect("nonempty");
            let loss = cross_entropy_unchecked(z, y);
            let dz = softmax_minus_onehot(z, y);
            let mut g = ParamGrads::zeros_like(model);
            model.backward(&trace, dz, Some((&mut g, 1.0)), false);
            (loss, g)
        })
        .collect();
    let k = 1.0 / batch.len() as f64;
    let mut total = ParamGrads::zeros_like(model);
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        total.accumulate(g, k);
    }
    Ok((loss * k, total))
}

/// Gradient of the cross-entropy loss with respect to the input.
pub fn grad_input(model: &MlpModel, x: &Tensor, y: usize) -> Result<Tensor> {
    model.check_input(x.data())?;
    if y >= model.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: model.num_classes(),
        });
    }
    let (_, g) = model.loss_and_input_grad(x.data(), y);
    Tensor::vector(g)
}

/// Mean loss and accuracy of the model on a batch.
pub fn evaluate(model: &MlpModel, batch: &LabeledBatch) -> (f64, f64) {
    let (loss, correct) = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = batch.sample(i);
            let z = model.logits(x);
            (cross_entropy_unchecked(&z, y), (argmax(&z) == y) as usize)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0usize), |(l, c), (li, ci)| (l + li, c + ci));
    let n = batch.len() as f64;
    (loss / n, correct as f64 / n)
}

fn check_batch(model: &MlpModel, batch: &LabeledBatch) -> Result<()> {
    if batch.dim() != model.input_dim() {
        return Err(Error::shape(format!("inputs of width {}", model.input_dim()), batch.dim()));
    }
    if let Some(&label) = batch.labels().iter().find(|&&l| l >= model.num_classes()) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: model.num_classes(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn linear(w: Vec<f64>, b: f64) -> MlpModel {
        let d = w.len();
        MlpModel::new(vec![Layer {
            weights: Tensor::new(vec![1, d], w).unwrap(),
            bias: Tensor::vector(vec![b]).unwrap(),
        }])
        .unwrap()
    }

    /// Two-logit linear model with logits `(0, w·x)`.
    fn two_logit(w: Vec<f64>) -> MlpModel {
        let d = w.len();
        let mut data = vec![0.0; d];
        data.extend(w);
        MlpModel::new(vec![Layer {
            weights: Tensor::new(vec![2, d], data).unwrap(),
            bias: Tensor::zeros(vec![2]),
        }])
        .unwrap()
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = MlpModel::zeros(&[3, 5, 4]).unwrap();
        let z = m.forward(&Tensor::vector(vec![0.3, -2.0, 9.0]).unwrap()).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
    }

    #[test]
    fn single_linear_layer() {
        let m = linear(vec![3.0, 4.0], 0.0);
        let z = m.forward(&Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(z.data(), &[7.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = MlpModel::init(&[4, 8, 3], &mut crate::rng::from_seed(1)).unwrap();
        let x = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let m = MlpModel::zeros(&[3, 2]).unwrap();
        assert!(m.forward(&Tensor::vector(vec![1.0, 2.0]).unwrap()).is_err());
    }

    #[test]
    fn new_rejects_broken_chain() {
        let l1 = Layer {
            weights: Tensor::zeros(vec![4, 3]),
            bias: Tensor::zeros(vec![4]),
        };
        let l2 = Layer {
            weights: Tensor::zeros(vec![2, 5]),
            bias: Tensor::zeros(vec![2]),
        };
        assert!(MlpModel::new(vec![l1, l2]).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Tensor::vector(vec![0.7; 10]).unwrap();
        assert_relative_eq!(cross_entropy(&uniform, 3).unwrap(), 10f64.ln(), epsilon = 1e-15);
        let big = Tensor::vector(vec![1000.0, 0.0]).unwrap();
        let l = cross_entropy(&big, 0).unwrap();
        assert!(l.is_finite() && (0.0..1e-300).contains(&l));
        // ln(1 + e) at m = 1
        let m1 = Tensor::vector(vec![0.0, 1.0]).unwrap();
        assert_relative_eq!(cross_entropy(&m1, 0).unwrap(), 1.313_261_687_518_223, epsilon = 1e-12);
        assert!(cross_entropy(&m1, 2).is_err());
        assert!(cross_entropy(&Tensor::vector(vec![1.0]).unwrap(), 0).is_err());
    }

    #[test]
    fn logistic_input_gradient() {
        // logits (0, w·x), class 0: dL/dx = σ(w·x) w
        let w = vec![0.5, -1.5, 2.0];
        let m = two_logit(w.clone());
        let x = Tensor::vector(vec![0.2, 0.1, 0.3]).unwrap();
        let s: f64 = w.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let sigma = 1.0 / (1.0 + (-s).exp());
        let g = grad_input(&m, &x, 0).unwrap();
        for (gi, wi) in g.data().iter().zip(&w) {
            assert_relative_eq!(*gi, sigma * wi, epsilon = 1e-14);
        }
    }

    #[test]
    fn tie_gradient_is_half_w() {
        let m = two_logit(vec![1.0, 0.0]);
        let g = grad_input(&m, &Tensor::vector(vec![0.0, 0.7]).unwrap(), 0).unwrap();
        assert_eq!(g.data(), &[0.5, 0.0]);
    }

    #[test]
    fn saturated_minimum_has_vanishing_gradient() {
        // linear model separating two points with a huge margin
        let m = two_logit(vec![-40.0, 0.0]);
        let inputs = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let batch = LabeledBatch::new(inputs, vec![0, 0], 2).unwrap();
        let (loss, g) = grad_params(&m, &batch).unwrap();
        assert!(loss < 1e-12);
        assert!(g.norm_l2() < 1e-9);
    }

    #[test]
    fn duplicate_samples_match_single_sample() {
        let m = MlpModel::init(&[3, 6, 3], &mut crate::rng::from_seed(5)).unwrap();
        let x = vec![0.1, 0.9, 0.4];
        let one = LabeledBatch::new(Tensor::new(vec![1, 3], x.clone()).unwrap(), vec![2], 3).unwrap();
        let mut xx = x.clone();
        xx.extend(&x);
        let two = LabeledBatch::new(Tensor::new(vec![2, 3], xx).unwrap(), vec![2, 2], 3).unwrap();
        let (_, g1) = grad_params(&m, &one).unwrap();
        let (_, g2) = grad_params(&m, &two).unwrap();
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn ascent_direction_is_positive_multiple_of_gradient() {
        let m = MlpModel::init(&[4, 7, 3], &mut crate::rng::from_seed(9)).unwrap();
        let x = [0.3, 0.6, 0.2, 0.9];
        let (_, g) = m.loss_and_input_grad(&x, 1);
        let a = m.loss_ascent(&x, 1);
        let ratio = g[0] / a.direction[0];
        assert!(ratio > 0.0);
        for (gi, ai) in g.iter().zip(&a.direction) {
            assert_relative_eq!(*gi, ratio * ai, epsilon = 1e-12, max_relative = 1e-10);
        }
        let ce = cross_entropy(&Tensor::vector(m.logits(&x)).unwrap(), 1).unwrap();
        assert_relative_eq!(a.loss, ce, epsilon = 1e-12);
    }

    #[test]
    fn batch_validation() {
        let inputs = Tensor::zeros(vec![2, 3]);
        assert!(LabeledBatch::new(inputs.clone(), vec![0, 3], 3).is_err());
        assert!(LabeledBatch::new(inputs.clone(), vec![0], 3).is_err());
        assert!(LabeledBatch::new(Tensor::zeros(vec![0, 3]), vec![], 3).is_err());
        assert!(LabeledBatch::new(inputs, vec![0, 2], 3).is_ok());
    }
}
