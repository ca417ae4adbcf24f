//! Dense feedforward classifiers with exact reverse-mode gradients.
//!
//! A model is a stack of affine layers `z = a Wᵀ + b` with a shared hidden
//! activation and an identity output layer. Weights are stored row-major as
//! `(out, in)`. Parameters flatten to a [`ParamVector`] in the canonical order
//! layer 0 weights, layer 0 biases, layer 1 weights, ... which is the space in
//! which gradient surgery operates.
//!
//! Batch gradients are means over samples. Input gradients are per sample.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{self, LossKind};

/// Class label. Single-logit models use `+1`/`-1`, multi-logit models use a
/// class index in `0..l`.
pub type Label = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    SingleLogit,
    MultiLogit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_dims: Vec<usize>,
    activation: Activation,
    output_head: OutputHead,
}

impl ModelSpec {
    pub fn new(
        layer_dims: Vec<usize>,
        activation: Activation,
        output_head: OutputHead,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "all dims must be >= 1, got {layer_dims:?}"
            )));
        }
        let out = *layer_dims.last().unwrap_or(&0);
        if output_head == OutputHead::SingleLogit && out != 1 {
            return Err(Error::InvalidSpec(format!(
                "single_logit head requires final dim 1, got {out}"
            )));
        }
        Ok(Self {
            layer_dims,
            activation,
            output_head,
        })
    }

    /// Logistic regression `f(x) = wᵀx + b` on `d` inputs.
    pub fn logistic(d: usize) -> Result<Self> {
        Self::new(vec![d, 1], Activation::Relu, OutputHead::SingleLogit)
    }

    /// Multi-logit MLP, e.g. `[1024, 256, 10]`.
    pub fn mlp(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        Self::new(layer_dims.to_vec(), activation, OutputHead::MultiLogit)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_head(&self) -> OutputHead {
        self.output_head
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// `(out, in)` for each layer.
    pub fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_dims.windows(2).map(|w| (w[1], w[0]))
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().map(|(o, i)| o * i + o).sum()
    }
}

/// Flat parameter (or gradient) vector in canonical layer order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `a·self + b·other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &ParamVector, b: f64) -> ParamVector {
        ParamVector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        )
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|x| a * x).collect())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out, in)`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Model parameters together with their spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Dense>,
    seed: u64,
}

/// Per-layer inputs and pre-activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[k]` is the input to layer `k`; `inputs[0]` is the batch.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }

    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.pre[self.pre.len() - 1].view()
    }
}

impl Model {
    /// Glorot-uniform weights, zero biases, deterministic per seed.
    pub fn init(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_shapes()
            .map(|(out, inp)| {
                let limit = (6.0 / (out + inp) as f64).sqrt();
                let weights =
                    Array2::from_shape_simple_fn((out, inp), || rng.random_range(-limit..=limit));
                Dense {
                    weights,
                    bias: Array1::zeros(out),
                }
            })
            .collect();
        Self { spec, layers, seed }
    }

    /// Builds a model from explicit layers, checking shapes against `spec`.
    pub fn from_layers(spec: ModelSpec, layers: Vec<Dense>, seed: u64) -> Result<Self> {
        if layers.len() != spec.num_layers() {
            return Err(Error::DimensionMismatch {
                context: "layer count",
                expected: spec.num_layers(),
                actual: layers.len(),
            });
        }
        for ((out, inp), layer) in spec.layer_shapes().zip(&layers) {
            if layer.weights.dim() != (out, inp) {
                return Err(Error::InvalidSpec(format!(
                    "layer weights {:?} do not match ({out}, {inp})",
                    layer.weights.dim()
                )));
            }
            if layer.bias.len() != out {
                return Err(Error::DimensionMismatch {
                    context: "bias length",
                    expected: out,
                    actual: layer.bias.len(),
                });
            }
        }
        let model = Self { spec, layers, seed };
        if !model.to_params().is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(model)
    }

    pub fn from_params(spec: ModelSpec, params: &ParamVector, seed: u64) -> Result<Self> {
        let mut model = Self::init(spec, seed);
        model.set_params(params)?;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn to_params(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.spec.param_count());
        for layer in &self.layers {
            out.extend(layer.weights.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        ParamVector(out)
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        let expected = self.spec.param_count();
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected,
                actual: params.len(),
            });
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w = params.0[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = params.0[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &ArrayView2<'_, f64>) -> Result<()> {
        let d = self.spec.input_dim();
        if batch.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "batch width",
                expected: d,
                actual: batch.ncols(),
            });
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input batch".into()));
        }
        Ok(())
    }

    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_batch(&batch)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = batch.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = current.dot(&layer.weights.t());
            z += &layer.bias;
            inputs.push(current);
            if k == last {
                pre.push(z);
                break;
            }
            let act = self.spec.activation;
            current = z.mapv(|v| act.apply(v));
            pre.push(z);
        }
        let logits = pre[last].clone();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok((logits, ForwardCache { inputs, pre }))
    }

    /// Forward pass without keeping intermediates.
    pub fn logits(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_batch(&batch)?;
        let last = self.layers.len() - 1;
        let mut current = batch.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = current.dot(&layer.weights.t());
            z += &layer.bias;
            if k == last {
                current = z;
                break;
            }
            let act = self.spec.activation;
            z.mapv_inplace(|v| act.apply(v));
            current = z;
        }
        Ok(current)
    }

    fn check_cache(&self, cache: &ForwardCache, dlogits: &ArrayView2<'_, f64>) -> Result<()> {
        if cache.inputs.len() != self.layers.len() || cache.pre.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache has {} layers, model has {}",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        for (k, ((out, inp), input)) in self.spec.layer_shapes().zip(&cache.inputs).enumerate() {
            if input.ncols() != inp || cache.pre[k].ncols() != out {
                return Err(Error::StaleCache(format!(
                    "layer {k} cached as ({}, {}), model expects ({out}, {inp})",
                    cache.pre[k].ncols(),
                    input.ncols()
                )));
            }
        }
        let n = cache.batch_size();
        if dlogits.dim() != (n, self.spec.output_dim()) {
            return Err(Error::StaleCache(format!(
                "loss gradient is {:?}, cache expects ({n}, {})",
                dlogits.dim(),
                self.spec.output_dim()
            )));
        }
        Ok(())
    }

    /// Propagates `dz` (gradient w.r.t. the pre-activation of layer `k + 1`)
    /// back to the pre-activation of layer `k`.
    fn back_through_hidden(&self, cache: &ForwardCache, k: usize, dz: &Array2<f64>) -> Array2<f64> {
        let mut da = dz.dot(&self.layers[k + 1].weights);
        let act = self.spec.activation;
        ndarray::Zip::from(&mut da)
            .and(&cache.pre[k])
            .and(&cache.inputs[k + 1])
            .for_each(|g, &z, &a| *g *= act.derivative(z, a));
        da
    }

    /// Mean-over-batch parameter gradient, given per-sample loss gradients
    /// with respect to the logits.
    pub fn param_gradient(
        &self,
        cache: &ForwardCache,
        dlogits: ArrayView2<'_, f64>,
    ) -> Result<ParamVector> {
        self.check_cache(cache, &dlogits)?;
        let n = cache.batch_size() as f64;
        let mut blocks: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        let mut dz = dlogits.to_owned();
        for k in (0..self.layers.len()).rev() {
            let mut dw = dz.t().dot(&cache.inputs[k]);
            dw /= n;
            let db = dz.sum_axis(Axis(0)) / n;
            blocks.push((dw, db));
            if k > 0 {
                dz = self.back_through_hidden(cache, k - 1, &dz);
            }
        }
        let mut out = Vec::with_capacity(self.spec.param_count());
        for (dw, db) in blocks.iter().rev() {
            out.extend(dw.iter().copied());
            out.extend(db.iter().copied());
        }
        Ok(ParamVector(out))
    }

    /// Per-sample parameter gradients, one row per sample in canonical layout.
    pub fn per_sample_param_gradients(
        &self,
        cache: &ForwardCache,
        dlogits: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        self.check_cache(cache, &dlogits)?;
        let n = cache.batch_size();
        let total = self.spec.param_count();
        let offsets: Vec<usize> = self
            .spec
            .layer_shapes()
            .scan(0, |acc, (o, i)| {
                let start = *acc;
                *acc += o * i + o;
                Some(start)
            })
            .collect();
        let mut out = Array2::zeros((n, total));
        let mut dz = dlogits.to_owned();
        for k in (0..self.layers.len()).rev() {
            let input = &cache.inputs[k];
            let (n_out, n_in) = self.layers[k].weights.dim();
            for s in 0..n {
                let mut row = out.row_mut(s);
                let row = row.as_slice_mut().expect("rows of a standard-layout array are contiguous");
                let base = offsets[k];
                for o in 0..n_out {
                    let g = dz[[s, o]];
                    let dst = &mut row[base + o * n_in..base + (o + 1) * n_in];
                    for (d, &a) in dst.iter_mut().zip(input.row(s)) {
                        *d = g * a;
                    }
                    row[base + n_out * n_in + o] = g;
                }
            }
            if k > 0 {
                dz = self.back_through_hidden(cache, k - 1, &dz);
            }
        }
        Ok(out)
    }

    /// Per-sample input gradients (row `i` is `∂L_i/∂x_i`).
    pub fn input_gradient_batch(
        &self,
        cache: &ForwardCache,
        dlogits: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        self.check_cache(cache, &dlogits)?;
        let mut dz = dlogits.to_owned();
        for k in (1..self.layers.len()).rev() {
            dz = self.back_through_hidden(cache, k - 1, &dz);
        }
        Ok(dz.dot(&self.layers[0].weights))
    }

    /// `∂L/∂x` for a single sample. Pair losses are evaluated with the clean
    /// and adversarial branches both at `x`, so the result is the full derivative.
    pub fn input_gradient(&self, x: ArrayView1<'_, f64>, y: Label, loss: &LossKind) -> Result<Array1<f64>> {
        let batch = x.insert_axis(Axis(0));
        let (logits, cache) = self.forward(batch)?;
        let (_, dlogits) = loss::batch_loss(loss, self.spec.output_head, logits.view(), &[y])?;
        let g = self.input_gradient_batch(&cache, dlogits.view())?;
        let g = g.row(0).to_owned();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input gradient".into()));
        }
        Ok(g)
    }

    /// Mean loss over a batch together with its parameter gradient.
    pub fn loss_and_param_gradient(
        &self,
        batch: ArrayView2<'_, f64>,
        labels: &[Label],
        loss: &LossKind,
    ) -> Result<(f64, ParamVector)> {
        let (logits, cache) = self.forward(batch)?;
        let (losses, dlogits) = loss::batch_loss(loss, self.spec.output_head, logits.view(), labels)?;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        Ok((mean, self.param_gradient(&cache, dlogits.view())?))
    }

    /// Class prediction for each row of `logits`.
    pub fn predict(&self, logits: ArrayView2<'_, f64>) -> Vec<Label> {
        match self.spec.output_head {
            OutputHead::SingleLogit => logits
                .column(0)
                .iter()
                .map(|&z| if z >= 0.0 { 1 } else { -1 })
                .collect(),
            OutputHead::MultiLogit => logits
                .rows()
                .into_iter()
                .map(|row| {
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    best as Label
                })
                .collect(),
        }
    }
}

/// Heavy-ball SGD: `v ← momentum·v + g`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut ParamVector,
    velocity: &mut ParamVector,
    grad: &ParamVector,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grad.len() || velocity.len() != grad.len() {
        return Err(Error::DimensionMismatch {
            context: "sgd_step",
            expected: params.len(),
            actual: if velocity.len() != params.len() {
                velocity.len()
            } else {
                grad.len()
            },
        });
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::arg("lr", format!("must be finite and >= 0, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::arg("momentum", format!("must be in [0, 1), got {momentum}")));
    }
    if !grad.is_finite() || !params.is_finite() || !velocity.is_finite() {
        return Err(Error::NonFinite("sgd_step inputs".into()));
    }
    for ((p, v), g) in params.0.iter_mut().zip(velocity.0.iter_mut()).zip(&grad.0) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_layer() -> Model {
        Model::init(ModelSpec::mlp(&[3, 4, 2], Activation::Tanh).unwrap(), 11)
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new(vec![3], Activation::Relu, OutputHead::MultiLogit).is_err());
        assert!(ModelSpec::new(vec![3, 0, 2], Activation::Relu, OutputHead::MultiLogit).is_err());
        assert!(ModelSpec::new(vec![3, 2], Activation::Relu, OutputHead::SingleLogit).is_err());
        let spec = ModelSpec::mlp(&[4, 3, 2], Activation::Relu).unwrap();
        assert_eq!(spec.param_count(), 4 * 3 + 3 + 3 * 2 + 2);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = ModelSpec::logistic(2).unwrap();
        let a = Model::init(spec.clone(), 7);
        let b = Model::init(spec, 7);
        assert_eq!(a, b);
        assert!(a.layers()[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn glorot_bound_holds() {
        let spec = ModelSpec::mlp(&[4, 3, 2], Activation::Relu).unwrap();
        // Layer 0 has fan sum 7, layer 1 has fan sum 5; the looser 6/5 bound
        // applies to layer 1 only.
        for seed in 0..500 {
            let m = Model::init(spec.clone(), seed);
            let l0 = (6.0f64 / 7.0).sqrt();
            let l1 = (6.0f64 / 5.0).sqrt();
            assert!(m.layers()[0].weights.iter().all(|w| w.abs() <= l0));
            assert!(m.layers()[1].weights.iter().all(|w| w.abs() <= l1));
        }
    }

    #[test]
    fn hand_computed_linear_logit() {
        let spec = ModelSpec::logistic(2).unwrap();
        let layer = Dense {
            weights: array![[1.0, -2.0]],
            bias: array![0.5],
        };
        let m = Model::from_layers(spec, vec![layer], 0).unwrap();
        let (logits, _) = m.forward(array![[1.0, 1.0]].view()).unwrap();
        assert_eq!(logits[[0, 0]], -0.5);
    }

    #[test]
    fn zero_model_outputs_zero() {
        let mut m = two_layer();
        let zeros = ParamVector::zeros(m.spec().param_count());
        m.set_params(&zeros).unwrap();
        let (logits, _) = m.forward(array![[0.3, -1.0, 2.0]].view()).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let g = m
            .input_gradient(array![0.3, -1.0, 2.0].view(), 1, &LossKind::SoftmaxCe)
            .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = two_layer();
        assert!(matches!(
            m.forward(array![[1.0, 2.0]].view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_params() {
        let m = two_layer();
        let (_, cache) = m.forward(array![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]].view()).unwrap();
        let g = m.param_gradient(&cache, Array2::zeros((2, 2)).view()).unwrap();
        assert_eq!(g.len(), m.spec().param_count());
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let m = two_layer();
        let (_, cache) = m.forward(array![[0.1, 0.2, 0.3]].view()).unwrap();
        assert!(matches!(
            m.param_gradient(&cache, Array2::zeros((2, 2)).view()),
            Err(Error::StaleCache(_))
        ));
        let other = Model::init(ModelSpec::mlp(&[3, 5, 2], Activation::Tanh).unwrap(), 0);
        assert!(matches!(
            other.param_gradient(&cache, Array2::zeros((1, 2)).view()),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn per_sample_rows_average_to_batch_gradient() {
        let m = two_layer();
        let x = array![[0.1, 0.2, 0.3], [0.4, -0.5, 0.6], [0.9, 0.0, -0.2]];
        let (logits, cache) = m.forward(x.view()).unwrap();
        let (_, d) = loss::batch_loss(&LossKind::SoftmaxCe, OutputHead::MultiLogit, logits.view(), &[0, 1, 1]).unwrap();
        let mean = m.param_gradient(&cache, d.view()).unwrap();
        let rows = m.per_sample_param_gradients(&cache, d.view()).unwrap();
        let avg = rows.mean_axis(Axis(0)).unwrap();
        for (a, b) in avg.iter().zip(mean.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let m = two_layer();
        let p = m.to_params();
        let m2 = Model::from_params(m.spec().clone(), &p, m.seed()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(m2.to_params(), p);
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = ParamVector::from_vec(vec![1.0, 2.0]);
        let mut v = ParamVector::zeros(2);
        let g = ParamVector::from_vec(vec![0.5, -1.0]);
        sgd_step(&mut p, &mut v, &g, 0.1, 0.0).unwrap();
        assert_eq!(p.as_slice(), &[1.0 - 0.1 * 0.5, 2.0 + 0.1 * 1.0]);
    }

    #[test]
    fn sgd_zero_lr_updates_velocity_only() {
        let mut p = ParamVector::from_vec(vec![1.0, 2.0]);
        let mut v = ParamVector::from_vec(vec![1.0, 1.0]);
        let g = ParamVector::from_vec(vec![0.5, -1.0]);
        sgd_step(&mut p, &mut v, &g, 0.0, 0.9).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 2.0]);
        assert_eq!(v.as_slice(), &[0.9 + 0.5, 0.9 - 1.0]);
    }

    #[test]
    fn sgd_momentum_unrolled() {
        // v1 = g, v2 = 1.9g, v3 = 2.71g; θ3 = θ0 − lr·5.61g.
        let g = 0.2;
        let lr = 0.1;
        let mut p = ParamVector::from_vec(vec![1.0]);
        let mut v = ParamVector::zeros(1);
        let grad = ParamVector::from_vec(vec![g]);
        for _ in 0..3 {
            sgd_step(&mut p, &mut v, &grad, lr, 0.9).unwrap();
        }
        let expected = 1.0 - lr * g - lr * (0.9 * g + g) - lr * (0.9 * (0.9 * g + g) + g);
        assert!((p.as_slice()[0] - expected).abs() < 1e-15);
        assert!((v.as_slice()[0] - 2.71 * g).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_bad_inputs() {
        let mut p = ParamVector::zeros(2);
        let mut v = ParamVector::zeros(2);
        assert!(sgd_step(&mut p, &mut v, &ParamVector::zeros(3), 0.1, 0.9).is_err());
        assert!(sgd_step(&mut p, &mut v, &ParamVector::zeros(2), 0.1, 1.0).is_err());
        assert!(sgd_step(&mut p, &mut v, &ParamVector::from_vec(vec![f64::NAN, 0.0]), 0.1, 0.0).is_err());
    }
}
