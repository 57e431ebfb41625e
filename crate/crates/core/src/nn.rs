//! Dense multilayer perceptrons with hand-derived gradients and Adam.
//!
//! Weight matrices are stored input-major: row `i` holds the weights leaving
//! input `i`, so a layer computes `y = x W + b`. Forward and backward passes
//! skip zero inputs, which makes the first layer cheap on the binary grid
//! observations.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Floating-point element type of a network (`f32` for training, `f64` in
/// gradient checks).
pub trait Scalar: Float + Sum + Debug + Default + Send + Sync + 'static {}
impl<T: Float + Sum + Debug + Default + Send + Sync + 'static> Scalar for T {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(T::zero()),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T = f32> {
    pub inputs: usize,
    pub outputs: usize,
    /// `inputs * outputs` values, input-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn row(&self, input: usize) -> &[T] {
        &self.weights[input * self.outputs..(input + 1) * self.outputs]
    }

    fn fill_zero(&mut self) {
        self.weights.iter_mut().for_each(|w| *w = T::zero());
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        let conv = |v: &T| U::from(*v).expect("float conversion");
        Layer {
            inputs: self.inputs,
            outputs: self.outputs,
            weights: self.weights.iter().map(conv).collect(),
            bias: self.bias.iter().map(conv).collect(),
        }
    }
}

#[inline]
fn axpy<T: Scalar>(out: &mut [T], alpha: T, x: &[T]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = *o + alpha * *v;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut total = acc.iter().copied().sum::<T>();
    for (x, y) in ra.iter().zip(rb) {
        total = total + *x * *y;
    }
    total
}

/// Gradient buffers shaped like an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T = f32> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> MlpGrads<T> {
    pub fn zeros_like(mlp: &Mlp<T>) -> Self {
        Self {
            layers: mlp.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.layers.iter_mut().for_each(Layer::fill_zero);
    }

    pub fn scale(&mut self, factor: T) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = *v * factor);
        }
    }

    /// Index of the first layer holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.layers.iter().position(|l| !l.is_finite())
    }

    pub fn is_all_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| *v == T::zero()))
    }
}

/// Per-layer outputs (after activation) recorded by a forward pass, plus
/// scratch space for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Workspace<T = f32> {
    outputs: Vec<Vec<T>>,
    delta: Vec<T>,
    delta_prev: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new() -> Self {
        Self {
            outputs: Vec::new(),
            delta: Vec::new(),
            delta_prev: Vec::new(),
        }
    }

    /// Output of the final layer from the most recent forward pass.
    pub fn output(&self) -> &[T] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T = f32> {
    layers: Vec<Layer<T>>,
    activation: Activation,
    /// Whether the activation is applied after the final layer as well.
    activate_output: bool,
}

impl<T: Scalar> Mlp<T> {
    pub fn from_layers(layers: Vec<Layer<T>>, activation: Activation, activate_output: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Usage("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Shape {
                    expected: pair[0].outputs,
                    actual: pair[1].inputs,
                    context: "consecutive layer sizes",
                });
            }
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Shape {
                    expected: l.inputs * l.outputs,
                    actual: l.weights.len(),
                    context: "layer weight buffer",
                });
            }
        }
        Ok(Self {
            layers,
            activation,
            activate_output,
        })
    }

    pub fn zeros(sizes: &[usize], activation: Activation, activate_output: bool) -> Self {
        assert!(sizes.len() >= 2, "layer_sizes needs an input and an output size");
        let layers = sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Self {
            layers,
            activation,
            activate_output,
        }
    }

    /// Orthogonal initialization; every layer but the last uses
    /// `hidden_gain`, the last uses `output_gain`. Biases start at zero.
    pub fn orthogonal(
        sizes: &[usize],
        activation: Activation,
        activate_output: bool,
        hidden_gain: f64,
        output_gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut mlp = Self::zeros(sizes, activation, activate_output);
        let n = mlp.layers.len();
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            let gain = if i + 1 == n { output_gain } else { hidden_gain };
            let m = orthogonal_matrix(layer.inputs, layer.outputs, rng);
            layer.weights = m.into_iter().map(|v| T::from(v * gain).unwrap()).collect();
        }
        mlp
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn activates_output(&self) -> bool {
        self.activate_output
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].inputs];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self.layers.iter().map(Layer::cast).collect(),
            activation: self.activation,
            activate_output: self.activate_output,
        }
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(Error::Shape {
                expected: self.input_len(),
                actual: input.len(),
                context: "network input",
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        let mut ws = Workspace::new();
        self.forward_with(input, &mut ws)?;
        Ok(ws.outputs.pop().unwrap())
    }

    /// Forward pass recording every layer output in `ws`.
    pub fn forward_with(&self, input: &[T], ws: &mut Workspace<T>) -> Result<()> {
        self.check_input(input)?;
        ws.outputs.resize_with(self.layers.len(), Vec::new);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, rest) = ws.outputs.split_at_mut(l);
            let x: &[T] = if l == 0 { input } else { &before[l - 1] };
            let out = &mut rest[0];
            out.clear();
            out.extend_from_slice(&layer.bias);
            for (i, &xi) in x.iter().enumerate() {
                if xi != T::zero() {
                    axpy(out, xi, layer.row(i));
                }
            }
            if l < last || self.activate_output {
                let act = self.activation;
                out.iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        Ok(())
    }

    /// Accumulate into `grads` the gradient of `output . output_grad` with
    /// respect to every parameter, using the outputs recorded in `ws` by a
    /// preceding [`Mlp::forward_with`] on the same `input`. When
    /// `input_grad` is given it receives the gradient with respect to the
    /// input.
    pub fn backward_with(
        &self,
        input: &[T],
        ws: &mut Workspace<T>,
        output_grad: &[T],
        grads: &mut MlpGrads<T>,
        mut input_grad: Option<&mut [T]>,
    ) -> Result<()> {
        self.check_input(input)?;
        if output_grad.len() != self.output_len() {
            return Err(Error::Shape {
                expected: self.output_len(),
                actual: output_grad.len(),
                context: "output gradient",
            });
        }
        let Workspace {
            outputs,
            delta,
            delta_prev,
        } = ws;
        debug_assert_eq!(outputs.len(), self.layers.len());
        delta.clear();
        delta.extend_from_slice(output_grad);
        let last = self.layers.len() - 1;
        if self.activate_output {
            let act = self.activation;
            for (d, &y) in delta.iter_mut().zip(&outputs[last]) {
                *d = *d * act.derivative_from_output(y);
            }
        }
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            let x: &[T] = if l == 0 { input } else { &outputs[l - 1] };
            for (i, &xi) in x.iter().enumerate() {
                if xi != T::zero() {
                    axpy(&mut g.weights[i * layer.outputs..(i + 1) * layer.outputs], xi, delta);
                }
            }
            axpy(&mut g.bias, T::one(), delta);

            if l > 0 {
                delta_prev.clear();
                let act = self.activation;
                delta_prev.extend(
                    outputs[l - 1]
                        .iter()
                        .enumerate()
                        .map(|(i, &y)| dot(layer.row(i), delta) * act.derivative_from_output(y)),
                );
                std::mem::swap(delta, delta_prev);
            } else if let Some(ig) = input_grad.as_deref_mut() {
                for (i, v) in ig.iter_mut().enumerate() {
                    *v = dot(layer.row(i), delta);
                }
            }
        }
        Ok(())
    }

    /// Gradients of `output . output_grad` at `input`.
    pub fn backward(&self, input: &[T], output_grad: &[T]) -> Result<MlpGrads<T>> {
        let mut ws = Workspace::new();
        self.forward_with(input, &mut ws)?;
        let mut grads = MlpGrads::zeros_like(self);
        self.backward_with(input, &mut ws, output_grad, &mut grads, None)?;
        Ok(grads)
    }
}

/// `rows x cols` matrix with orthonormal rows or columns (whichever is the
/// smaller set), returned row-major.
fn orthogonal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f64> {
    let (count, len) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows >= cols { basis[c][r] } else { basis[r][c] };
        }
    }
    out
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub first_moment: MlpGrads<T>,
    pub second_moment: MlpGrads<T>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &Mlp<T>, learning_rate: f64) -> Self {
        Self {
            first_moment: MlpGrads::zeros_like(params),
            second_moment: MlpGrads::zeros_like(params),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut Mlp<T>, grads: &MlpGrads<T>) -> Result<()> {
        self.step_masked(params, grads, &[])
    }

    /// Bias-corrected Adam update. Layers whose index is `true` in `frozen`
    /// are left untouched together with their moments.
    pub fn step_masked(&mut self, params: &mut Mlp<T>, grads: &MlpGrads<T>, frozen: &[bool]) -> Result<()> {
        if grads.layers.len() != params.layers.len() {
            return Err(Error::Shape {
                expected: params.layers.len(),
                actual: grads.layers.len(),
                context: "gradient layer count",
            });
        }
        if let Some(layer) = grads.first_non_finite() {
            return Err(Error::Numeric(format!("gradient of layer {layer}")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = |v: f64| T::from(v).unwrap();
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let correction1 = c(1.0 - self.beta1.powi(t));
        let correction2 = c(1.0 - self.beta2.powi(t));
        let (lr, eps) = (c(self.learning_rate), c(self.epsilon));
        let one = T::one();

        for (l, layer) in params.layers.iter_mut().enumerate() {
            if frozen.get(l).copied().unwrap_or(false) {
                continue;
            }
            let g = &grads.layers[l];
            let m = &mut self.first_moment.layers[l];
            let v = &mut self.second_moment.layers[l];
            let update = |p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (one - b1) * g[i];
                    v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                    let m_hat = m[i] / correction1;
                    let v_hat = v[i] / correction2;
                    p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            };
            update(&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights);
            update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IAA1";

/// Serialize layers: magic, LE u32 layer count, then per layer LE u32 rows
/// and cols, row-major LE f32 weights (`rows` = inputs), then the biases.
pub fn encode_layers<'a>(layers: impl IntoIterator<Item = &'a Layer<f32>>) -> Vec<u8> {
    let layers: Vec<&Layer<f32>> = layers.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
        out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        for w in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out
}

pub fn decode_layers(bytes: &[u8]) -> std::result::Result<Vec<Layer<f32>>, String> {
    let mut cursor = bytes;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        if cursor.len() < n {
            return Err(format!("truncated: wanted {n} more bytes, {} left", cursor.len()));
        }
        let (head, tail) = cursor.split_at(n);
        cursor = tail;
        Ok(head)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let count = read_u32(take(4)?);
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = read_u32(take(4)?);
        let cols = read_u32(take(4)?);
        let floats = |b: &[u8]| -> Vec<f32> {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let weights = floats(take(rows * cols * 4)?);
        let bias = floats(take(cols * 4)?);
        layers.push(Layer {
            inputs: rows,
            outputs: cols,
            weights,
            bias,
        });
    }
    if !cursor.is_empty() {
        return Err(format!("{} trailing bytes", cursor.len()));
    }
    Ok(layers)
}
