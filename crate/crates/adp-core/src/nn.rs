//! Dense network building blocks on top of the tape.
//!
//! A [`NetworkSpec`] is a plain layer-sequence description; [`NetworkParams`]
//! holds the flat weight/bias vectors; binding the params onto a [`Tape`]
//! yields tracked leaves whose gradients feed [`crate::adam`].

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::adam::{adam_step, AdamParams, AdamState};
use crate::autodiff::{Tape, TensorId};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub act: Activation,
}

/// Layer-sequence description for one network block.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Dense chain `widths[0] → widths[1] → ...` with `hidden` activations
    /// and `last` on the final layer.
    pub fn chain(widths: &[usize], hidden: Activation, last: Activation) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                inputs: w[0],
                outputs: w[1],
                act: if i + 2 == widths.len() { last } else { hidden },
            })
            .collect();
        NetworkSpec { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }
}

/// Weights and biases for one network, stored as flat vectors.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    /// Per layer: (weights row-major inputs×outputs, biases).
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl NetworkParams {
    /// Xavier-style init, deterministic in the rng stream.
    pub fn init(spec: NetworkSpec, rng: &mut ChaCha12Rng) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let std = (2.0 / (l.inputs + l.outputs) as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                let w = (0..l.inputs * l.outputs)
                    .map(|_| normal.sample(rng))
                    .collect();
                let b = vec![0.0; l.outputs];
                (w, b)
            })
            .collect();
        NetworkParams { spec, layers }
    }

    /// Load params onto a tape. `tracked` decides whether grads accumulate.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> BoundNetwork {
        let refs = self
            .spec
            .layers
            .iter()
            .zip(&self.layers)
            .map(|(l, (w, b))| {
                let wid = tape.leaf(&[l.inputs, l.outputs], w.clone(), tracked);
                let bid = tape.leaf(&[l.outputs], b.clone(), tracked);
                (wid, bid)
            })
            .collect();
        BoundNetwork {
            spec: self.spec.clone(),
            refs,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Flat copy of all parameters, layer by layer (weights then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in &self.layers {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut i = 0;
        for (w, b) in &mut self.layers {
            let wl = w.len();
            w.copy_from_slice(&flat[i..i + wl]);
            i += wl;
            let bl = b.len();
            b.copy_from_slice(&flat[i..i + bl]);
            i += bl;
        }
        assert_eq!(i, flat.len(), "flat parameter size mismatch");
    }
}

/// Params bound to a specific tape as tracked leaves.
pub struct BoundNetwork {
    spec: NetworkSpec,
    refs: Vec<(TensorId, TensorId)>,
}

impl BoundNetwork {
    /// Forward a (batch × input_dim) matrix through the network.
    pub fn forward(&self, tape: &mut Tape, mut x: TensorId) -> Result<TensorId> {
        for (layer, (w, b)) in self.spec.layers.iter().zip(&self.refs) {
            let h = tape.matmul(x, *w)?;
            let hb = tape.add(h, *b)?;
            x = match layer.act {
                Activation::Linear => hb,
                Activation::Relu => tape.relu(hb),
                Activation::Tanh => tape.tanh(hb),
                Activation::Sigmoid => tape.sigmoid(hb),
                Activation::Softplus => tape.softplus(hb),
            };
        }
        Ok(x)
    }

    /// Forward but stop before the last layer's activation+matmul: returns
    /// the activations feeding the final layer (penultimate features).
    pub fn forward_penultimate(&self, tape: &mut Tape, mut x: TensorId) -> Result<TensorId> {
        let n = self.spec.layers.len();
        for (layer, (w, b)) in self.spec.layers.iter().zip(&self.refs).take(n - 1) {
            let h = tape.matmul(x, *w)?;
            let hb = tape.add(h, *b)?;
            x = match layer.act {
                Activation::Linear => hb,
                Activation::Relu => tape.relu(hb),
                Activation::Tanh => tape.tanh(hb),
                Activation::Sigmoid => tape.sigmoid(hb),
                Activation::Softplus => tape.softplus(hb),
            };
        }
        Ok(x)
    }

    /// Gradients of all bound parameters, in `flatten` order.
    pub fn grads(&self, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.refs {
            out.extend_from_slice(tape.grad(*w).expect("untracked bind"));
            out.extend_from_slice(tape.grad(*b).expect("untracked bind"));
        }
        out
    }
}

/// A network plus its optimizer state.
#[derive(Debug, Clone)]
pub struct TrainableNet {
    pub params: NetworkParams,
    pub opt: AdamState,
}

impl TrainableNet {
    pub fn new(spec: NetworkSpec, rng: &mut ChaCha12Rng) -> Self {
        let params = NetworkParams::init(spec, rng);
        let opt = AdamState::new(params.param_count());
        TrainableNet { params, opt }
    }

    /// Apply one Adam step from gradients in `flatten` order.
    pub fn step(&mut self, grads: &[f64], hp: &AdamParams) {
        let mut flat = self.params.flatten();
        adam_step(&mut flat, grads, &mut self.opt, hp);
        self.params.load_flat(&flat);
    }
}

/// Standard-normal latent batch (batch × dim).
pub fn sample_latent(batch: usize, dim: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..batch * dim).map(|_| normal.sample(rng)).collect()
}

/// Uniform batch indices without replacement semantics (with replacement,
/// which is fine for SGD sampling at desk scale).
pub fn sample_indices(count: usize, batch: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..count)).collect()
}
