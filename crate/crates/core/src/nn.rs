//! Dense feedforward networks with hand-written backpropagation and an Adam
//! optimizer.
//!
//! Parameters of a [`DenseNet`] live in one flat buffer. Each layer stores its
//! weight matrix row-major (`output x input`) followed by its bias, so a
//! gradient buffer of the same length lines up with the parameters 1:1.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
    Tanh,
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at pre-activation `pre`, given `post = apply(pre)`.
    #[inline]
    pub fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(pre),
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerShape {
    pub fn num_params(&self) -> usize {
        self.output * (self.input + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

/// Activations recorded by [`DenseNet::forward_cached`], consumed by
/// [`DenseNet::backward`].
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    // inputs[l] is the input to layer l; inputs[L] is the network output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn is_recorded(&self) -> bool {
        !self.pre.is_empty()
    }

    pub fn output(&self) -> Option<&[f64]> {
        if self.is_recorded() {
            self.inputs.last().map(|v| v.as_slice())
        } else {
            None
        }
    }

    pub fn clear(&mut self) {
        self.inputs.clear();
        self.pre.clear();
    }
}

/// Gradient buffer aligned with a parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTape(Vec<f64>);

impl GradientTape {
    pub fn zeros(len: usize) -> Self {
        GradientTape(vec![0.0; len])
    }

    pub fn clear(&mut self) {
        self.0.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self += other`, in index order.
    pub fn accumulate(&mut self, other: &[f64]) {
        debug_assert_eq!(self.0.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl DenseNet {
    /// Build a network from explicit layer shapes and a parameter buffer.
    pub fn from_parts(layers: Vec<LayerShape>, params: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output != pair[1].input {
                return Err(Error::config(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].output,
                    i + 1,
                    pair[1].input
                )));
            }
        }
        let expected: usize = layers.iter().map(LayerShape::num_params).sum();
        if params.len() != expected {
            return Err(Error::config(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(DenseNet { layers, params })
    }

    /// Multilayer perceptron with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    /// weights and zero biases.
    pub fn mlp<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if input == 0 || output == 0 || hidden.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &h in hidden {
            layers.push(LayerShape {
                input: prev,
                output: h,
                activation: hidden_activation,
            });
            prev = h;
        }
        layers.push(LayerShape {
            input: prev,
            output,
            activation: output_activation,
        });
        let mut params = Vec::with_capacity(layers.iter().map(LayerShape::num_params).sum());
        for l in &layers {
            let limit = 1.0 / (l.input as f64).sqrt();
            params.extend((0..l.output * l.input).map(|_| rng.random_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, l.output));
        }
        Self::from_parts(layers, params)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offsets of (weights, bias) for layer `l` in the flat buffer.
    fn offsets(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut off = 0;
        self.layers.iter().map(move |l| {
            let w = off;
            let b = off + l.output * l.input;
            off = b + l.output;
            (w, b)
        })
    }

    /// Human-readable location of a flat parameter index.
    pub fn param_path(&self, mut index: usize) -> String {
        for (i, l) in self.layers.iter().enumerate() {
            let w = l.output * l.input;
            if index < w {
                return format!("layer{i}.weight[{}][{}]", index / l.input, index % l.input);
            }
            index -= w;
            if index < l.output {
                return format!("layer{i}.bias[{index}]");
            }
            index -= l.output;
        }
        format!("out_of_range[{index}]")
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::config(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        if let Some(i) = input.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("network input[{i}]"),
            });
        }
        Ok(())
    }

    fn affine(&self, layer: usize, w_off: usize, b_off: usize, x: &[f64], out: &mut Vec<f64>) {
        let shape = self.layers[layer];
        out.clear();
        let weights = &self.params[w_off..b_off];
        let bias = &self.params[b_off..b_off + shape.output];
        for (row, b) in weights.chunks_exact(shape.input).zip(bias) {
            let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            out.push(dot + b);
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let mut pre = Vec::new();
        for (i, (w, b)) in self.offsets().enumerate() {
            self.affine(i, w, b, &x, &mut pre);
            let act = self.layers[i].activation;
            x.clear();
            x.extend(pre.iter().map(|&p| act.apply(p)));
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    location: format!("layer {i} output"),
                });
            }
        }
        Ok(x)
    }

    /// Forward pass that records what [`DenseNet::backward`] needs.
    pub fn forward_cached(&self, input: &[f64], cache: &mut ForwardCache) -> Result<Vec<f64>> {
        self.check_input(input)?;
        cache.clear();
        cache.inputs.push(input.to_vec());
        for (i, (w, b)) in self.offsets().enumerate() {
            let mut pre = Vec::with_capacity(self.layers[i].output);
            self.affine(i, w, b, &cache.inputs[i], &mut pre);
            let act = self.layers[i].activation;
            let post: Vec<f64> = pre.iter().map(|&p| act.apply(p)).collect();
            if post.iter().any(|v| !v.is_finite()) {
                cache.clear();
                return Err(Error::NonFinite {
                    location: format!("layer {i} output"),
                });
            }
            cache.pre.push(pre);
            cache.inputs.push(post);
        }
        Ok(cache.inputs[self.layers.len()].clone())
    }

    /// Backpropagate `upstream` (dLoss/dOutput) through the recorded pass.
    ///
    /// Parameter gradients are added into `grads` (length `num_params`); the
    /// gradient with respect to the network input is returned.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        if !cache.is_recorded() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        if cache.pre.len() != self.layers.len()
            || cache.pre.iter().zip(&self.layers).any(|(p, l)| p.len() != l.output)
            || cache.inputs[0].len() != self.input_dim()
        {
            return Err(Error::State("forward record does not belong to this network".into()));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::config(format!(
                "upstream gradient has {} entries, network emits {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::config("gradient buffer does not match parameter count"));
        }
        let offsets: Vec<(usize, usize)> = self.offsets().collect();
        let mut delta_out = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let shape = self.layers[i];
            let (w_off, b_off) = offsets[i];
            let pre = &cache.pre[i];
            let post = &cache.inputs[i + 1];
            let x = &cache.inputs[i];
            let delta: Vec<f64> = delta_out
                .iter()
                .zip(pre.iter().zip(post))
                .map(|(g, (&p, &q))| g * shape.activation.derivative(p, q))
                .collect();
            let mut delta_in = vec![0.0; shape.input];
            for (o, &d) in delta.iter().enumerate() {
                grads[b_off + o] += d;
                if d == 0.0 {
                    continue;
                }
                let row = w_off + o * shape.input;
                let grow = &mut grads[row..row + shape.input];
                for (g, v) in grow.iter_mut().zip(x) {
                    *g += d * v;
                }
                let wrow = &self.params[row..row + shape.input];
                for (di, w) in delta_in.iter_mut().zip(wrow) {
                    *di += d * w;
                }
            }
            delta_out = delta_in;
        }
        Ok(delta_out)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let net: DenseNet = serde_json::from_reader(std::io::BufReader::new(file))?;
        Self::from_parts(net.layers, net.params)
    }
}

/// A named, mutable slice of model parameters handed to the optimizer.
pub struct ParamGroup<'a> {
    pub name: &'a str,
    pub values: &'a mut [f64],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one descent step. `grads` is the concatenation of the gradients
    /// of every group, in group order. A non-finite gradient aborts the step
    /// before any parameter is touched.
    pub fn step(&mut self, groups: &mut [ParamGroup<'_>], grads: &[f64]) -> Result<()> {
        let total: usize = groups.iter().map(|g| g.values.len()).sum();
        if total != self.m.len() || grads.len() != total {
            return Err(Error::config(format!(
                "optimizer tracks {} parameters, got {total} parameters and {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            let mut rest = bad;
            let mut location = format!("gradient[{bad}]");
            for g in groups.iter() {
                if rest < g.values.len() {
                    location = format!("{}[{rest}]", g.name);
                    break;
                }
                rest -= g.values.len();
            }
            return Err(Error::NonFinite { location });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut i = 0;
        for group in groups.iter_mut() {
            for p in group.values.iter_mut() {
                let g = grads[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i] / c1;
                let v_hat = self.v[i] / c2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                i += 1;
            }
        }
        Ok(())
    }
}
