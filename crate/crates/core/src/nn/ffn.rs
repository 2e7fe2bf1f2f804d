use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Grads, Matrix, NnError, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
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

/// Shape of a fully connected stack. Hidden layers use `activation`; the output
/// layer is affine only.
///
/// Parameters live in a [`ParamStore`] starting at `first_slot`, laid out as
/// `(weight, bias)` pairs per layer with weights shaped `out x in`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    pub first_slot: usize,
}

/// Activations retained from a forward pass.
#[derive(Debug, Clone)]
pub struct FfnCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl FfnSpec {
    fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden.len() + 2);
        d.push(self.input);
        d.extend(&self.hidden);
        d.push(self.output);
        d
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Allocates this network's parameters at the end of `store` and records the slot.
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng>(
        input: usize,
        hidden: Vec<usize>,
        output: usize,
        activation: Activation,
        prefix: &str,
        init_scale: f64,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let spec = FfnSpec {
            input,
            hidden,
            output,
            activation,
            first_slot: store.len(),
        };
        let dims = spec.dims();
        for (l, w) in dims.windows(2).enumerate() {
            store.push(
                format!("{prefix}.w{l}"),
                Matrix::uniform(w[1], w[0], init_scale, rng),
            );
            store.push(format!("{prefix}.b{l}"), Matrix::zeros(w[1], 1));
        }
        spec
    }

    pub fn forward(&self, store: &ParamStore, input: &[f64]) -> Result<FfnCache, NnError> {
        if input.len() != self.input {
            return Err(NnError::Shape {
                context: "ffn input",
                expected: (self.input, 1),
                actual: (input.len(), 1),
            });
        }
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers - 1);
        let mut x = input.to_vec();
        for l in 0..layers {
            let w = store.get(self.first_slot + 2 * l);
            let b = store.get(self.first_slot + 2 * l + 1);
            let mut z = w.matvec(&x);
            for (zi, bi) in z.iter_mut().zip(b.as_slice()) {
                *zi += bi;
            }
            inputs.push(std::mem::take(&mut x));
            if l + 1 < layers {
                x = z.iter().map(|&zi| self.activation.apply(zi)).collect();
                pre.push(z);
            } else {
                x = z;
            }
        }
        Ok(FfnCache {
            inputs,
            pre,
            output: x,
        })
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dinput`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &FfnCache,
        d_out: &[f64],
        grads: &mut Grads,
    ) -> Vec<f64> {
        let layers = self.num_layers();
        let mut delta = d_out.to_vec();
        for l in (0..layers).rev() {
            let w_slot = self.first_slot + 2 * l;
            grads.get_mut(w_slot).add_outer(1.0, &delta, &cache.inputs[l]);
            let gb = grads.get_mut(w_slot + 1).as_mut_slice();
            for (g, d) in gb.iter_mut().zip(&delta) {
                *g += d;
            }
            let mut d_in = store.get(w_slot).matvec_t(&delta);
            if l > 0 {
                let z = &cache.pre[l - 1];
                let a = &cache.inputs[l];
                for ((di, &zi), &ai) in d_in.iter_mut().zip(z).zip(a) {
                    *di *= self.activation.derivative(zi, ai);
                }
            }
            delta = d_in;
        }
        delta
    }
}
