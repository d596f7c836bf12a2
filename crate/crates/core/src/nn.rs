//! Parameterized layers. A layer only stores the names of its parameters;
//! values live in a [`ParamStore`] and are bound to a [`Graph`] per pass.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{fan_in_uniform, ParamStore};
use crate::tensor::Tensor;

/// Gain for layers feeding a ReLU.
pub const RELU_GAIN: f64 = 6.0;
/// Gain for layers feeding anything else.
pub const LINEAR_GAIN: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, kernel: usize, bias: bool) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: bias.then(|| format!("{prefix}.bias")),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, gain: f64) {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        store.insert(&self.weight, fan_in_uniform(rng, &shape, fan_in, gain));
        if let Some(b) = &self.bias {
            store.insert(b, Tensor::zeros([self.out_channels]));
        }
    }

    pub fn forward(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, &self.weight);
        let b = self.bias.as_ref().map(|b| g.param(ps, b));
        g.conv2d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_features: usize, out_features: usize) -> Self {
        Self { weight: format!("{prefix}.weight"), bias: format!("{prefix}.bias"), in_features, out_features }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, gain: f64) {
        let shape = [self.out_features, self.in_features];
        store.insert(&self.weight, fan_in_uniform(rng, &shape, self.in_features, gain));
        store.insert(&self.bias, Tensor::zeros([self.out_features]));
    }

    /// `x: [N, in] -> [N, out]`.
    pub fn forward(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, &self.weight);
        let b = g.param(ps, &self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub fc0: Linear,
    pub fc1: Linear,
}

impl Mlp2 {
    pub fn new(prefix: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self { fc0: Linear::new(&format!("{prefix}.fc0"), input, hidden), fc1: Linear::new(&format!("{prefix}.fc1"), hidden, output) }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.fc0.init(store, rng, RELU_GAIN);
        self.fc1.init(store, rng, LINEAR_GAIN);
    }

    pub fn forward(&self, g: &Graph, ps: &ParamStore, x: Var) -> Var {
        let h = g.relu(self.fc0.forward(g, ps, x));
        self.fc1.forward(g, ps, h)
    }
}
