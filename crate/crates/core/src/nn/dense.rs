use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{elu, elu_grad_from_output};
use super::NnError;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => elu(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Elu => elu_grad_from_output(pre, post),
            Activation::Tanh => 1.0 - post * post,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// A fully connected feed-forward network with all parameters in one flat buffer.
///
/// Layer `k` stores its row-major `outputs × inputs` weight matrix followed by its
/// bias vector, starting at `offsets[k]`.
#[derive(Clone, Debug)]
pub struct DenseNet {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    version: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.params == other.params
    }
}

/// Activation trace of one forward call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    layers: Vec<LayerShape>,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&self.input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl DenseNet {
    /// Builds a zero-initialized network from explicit layer shapes.
    pub fn new(layers: Vec<LayerShape>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::InvalidLayers("no layers".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(NnError::InvalidLayers(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].outputs,
                    k + 1,
                    pair[1].inputs
                )));
            }
        }
        if layers.iter().any(|l| l.inputs == 0 || l.outputs == 0) {
            return Err(NnError::InvalidLayers("zero-width layer".into()));
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_count();
        }
        Ok(Self { layers, offsets, params: vec![0.0; total], version: 0 })
    }

    /// Zero-initialized MLP over `dims = [in, h1, ..., out]`.
    pub fn mlp(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::InvalidLayers("need at least input and output dims".into()));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| LayerShape {
                inputs: dims[k],
                outputs: dims[k + 1],
                activation: if k + 1 == n { output } else { hidden },
            })
            .collect();
        Self::new(layers)
    }

    /// Scaled uniform init: weights in `±gain·sqrt(3/fan_in)` (unit-gain rows have
    /// the variance of an orthogonal init), biases zero. Hidden layers use gain √2,
    /// the last layer `output_gain`. Each layer draws from its own stream keyed by
    /// `(seed, layer index)`.
    pub fn init_scaled_uniform(&mut self, seed: u64, output_gain: f64) {
        let n = self.layers.len();
        for k in 0..n {
            let shape = self.layers[k];
            let gain = if k + 1 == n { output_gain } else { std::f64::consts::SQRT_2 };
            let bound = gain * (3.0 / shape.inputs as f64).sqrt();
            let mut rng = seed::rng(seed, &[seed::tag("layer"), k as u64]);
            let off = self.offsets[k];
            let nw = shape.inputs * shape.outputs;
            for w in &mut self.params[off..off + nw] {
                *w = if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 };
            }
            for b in &mut self.params[off + nw..off + shape.param_count()] {
                *b = 0.0;
            }
        }
        self.version += 1;
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates caches from earlier forward calls.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::ShapeMismatch { expected: self.params.len(), got: params.len() });
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let s = self.layers[layer];
        let off = self.offsets[layer];
        &self.params[off..off + s.inputs * s.outputs]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.layers[layer];
        let off = self.offsets[layer] + s.inputs * s.outputs;
        &self.params[off..off + s.outputs]
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput);
        }
        Ok(())
    }

    fn layer_forward(&self, k: usize, x: &[f64], pre: &mut Vec<f64>, post: &mut Vec<f64>) {
        let shape = self.layers[k];
        let w = self.weights(k);
        let b = self.bias(k);
        pre.clear();
        post.clear();
        for (row, bias) in w.chunks_exact(shape.inputs).zip(b) {
            let z = bias + dot(row, x);
            pre.push(z);
            post.push(shape.activation.apply(z));
        }
    }

    /// Forward pass without keeping the activation trace.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut pre = Vec::new();
        let mut post = Vec::new();
        for k in 0..self.layers.len() {
            self.layer_forward(k, &cur, &mut pre, &mut post);
            std::mem::swap(&mut cur, &mut post);
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache), NnError> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut pre_all = Vec::with_capacity(n);
        let mut post_all: Vec<Vec<f64>> = Vec::with_capacity(n);
        for k in 0..n {
            let mut pre = Vec::with_capacity(self.layers[k].outputs);
            let mut post = Vec::with_capacity(self.layers[k].outputs);
            let input = if k == 0 { x } else { &post_all[k - 1] };
            self.layer_forward(k, input, &mut pre, &mut post);
            pre_all.push(pre);
            post_all.push(post);
        }
        let y = post_all[n - 1].clone();
        Ok((
            y,
            ForwardCache {
                version: self.version,
                layers: self.layers.clone(),
                input: x.to_vec(),
                pre: pre_all,
                post: post_all,
            },
        ))
    }

    fn check_cache(&self, cache: &ForwardCache, dy: &[f64]) -> Result<(), NnError> {
        if cache.layers != self.layers || cache.version != self.version {
            return Err(NnError::StaleCache);
        }
        if dy.len() != self.output_dim() {
            return Err(NnError::DimensionMismatch { expected: self.output_dim(), got: dy.len() });
        }
        Ok(())
    }

    /// Exact reverse-mode gradients of `dy · y` with respect to parameters and input.
    pub fn backward(&self, cache: &ForwardCache, dy: &[f64]) -> Result<Gradients, NnError> {
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward_into(cache, dy, Some(&mut params))?;
        Ok(Gradients { params, input })
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns the
    /// input gradient.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        dy: &[f64],
        mut grads: Option<&mut [f64]>,
    ) -> Result<Vec<f64>, NnError> {
        self.check_cache(cache, dy)?;
        if let Some(g) = grads.as_deref() {
            if g.len() != self.params.len() {
                return Err(NnError::ShapeMismatch { expected: self.params.len(), got: g.len() });
            }
        }
        let mut delta: Vec<f64> = dy.to_vec();
        for k in (0..self.layers.len()).rev() {
            let shape = self.layers[k];
            for ((d, &z), &a) in delta.iter_mut().zip(&cache.pre[k]).zip(&cache.post[k]) {
                *d *= shape.activation.derivative(z, a);
            }
            let input: &[f64] = if k == 0 { &cache.input } else { &cache.post[k - 1] };
            if let Some(g) = grads.as_deref_mut() {
                let off = self.offsets[k];
                let nw = shape.inputs * shape.outputs;
                let (gw, rest) = g[off..off + shape.param_count()].split_at_mut(nw);
                for (grow, &d) in gw.chunks_exact_mut(shape.inputs).zip(&delta) {
                    if d != 0.0 {
                        for (gv, &xv) in grow.iter_mut().zip(input) {
                            *gv += d * xv;
                        }
                    }
                }
                for (gb, &d) in rest.iter_mut().zip(&delta) {
                    *gb += d;
                }
            }
            let mut dx = vec![0.0; shape.inputs];
            for (row, &d) in self.weights(k).chunks_exact(shape.inputs).zip(&delta) {
                if d != 0.0 {
                    for (dxv, &wv) in dx.iter_mut().zip(row) {
                        *dxv += d * wv;
                    }
                }
            }
            delta = dx;
        }
        Ok(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_net(seed: u64, dims: &[usize], hidden: Activation) -> DenseNet {
        let mut net = DenseNet::mlp(dims, hidden, Activation::Identity).unwrap();
        net.init_scaled_uniform(seed, 1.0);
        // non-zero biases so every code path is exercised
        let mut rng = seed::rng(seed, &[99]);
        for p in net.params_mut() {
            *p += rng.gen_range(-0.1..0.1);
        }
        net
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::mlp(&[5, 7, 3], Activation::Elu, Activation::Elu).unwrap();
        let y = net.predict(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap();
        assert_eq!(y, vec![0.0; 3]);
    }

    #[test]
    fn identity_layer() {
        let mut net = DenseNet::mlp(&[2, 2], Activation::Identity, Activation::Identity).unwrap();
        net.set_params(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let (y, cache) = net.forward(&[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
        let g = net.backward(&cache, &[0.3, -0.7]).unwrap();
        assert_eq!(g.input, vec![0.3, -0.7]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = random_net(3, &[4, 6, 2], Activation::Tanh);
        let (_, cache) = net.forward(&[0.1, 0.2, -0.3, 0.4]).unwrap();
        let g = net.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_chain_is_validated() {
        let bad = vec![
            LayerShape { inputs: 3, outputs: 4, activation: Activation::Elu },
            LayerShape { inputs: 5, outputs: 1, activation: Activation::Identity },
        ];
        assert!(matches!(DenseNet::new(bad), Err(NnError::InvalidLayers(_))));
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let net = random_net(1, &[3, 2], Activation::Elu);
        assert!(matches!(
            net.predict(&[1.0, 2.0]),
            Err(NnError::DimensionMismatch { expected: 3, got: 2 })
        ));
        assert!(matches!(net.predict(&[1.0, f64::NAN, 0.0]), Err(NnError::NonFiniteInput)));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = random_net(2, &[3, 4, 2], Activation::Elu);
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        net.params_mut()[0] += 1.0;
        assert!(matches!(net.backward(&cache, &[1.0, 1.0]), Err(NnError::StaleCache)));
        let other = random_net(2, &[3, 5, 2], Activation::Elu);
        let (_, cache) = other.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert!(matches!(net.backward(&cache, &[1.0, 1.0]), Err(NnError::StaleCache)));
    }

    #[test]
    fn forward_is_pure() {
        let net = random_net(5, &[6, 8, 8, 3], Activation::Elu);
        let x = [0.5, -0.25, 1.0, 0.0, 2.0, -1.5];
        let a = net.predict(&x).unwrap();
        let (b, _) = net.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, net.predict(&x).unwrap());
    }

    #[test]
    fn init_is_seeded() {
        let mut a = DenseNet::mlp(&[4, 8, 2], Activation::Elu, Activation::Identity).unwrap();
        let mut b = a.clone();
        a.init_scaled_uniform(11, 0.01);
        b.init_scaled_uniform(11, 0.01);
        assert_eq!(a, b);
        b.init_scaled_uniform(12, 0.01);
        assert_ne!(a, b);
        assert!(a.bias(0).iter().all(|&v| v == 0.0));
    }
}
