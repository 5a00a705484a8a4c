//! MLP networks over the autodiff tape: affine layers with ReLU/Tanh
//! activations, seeded Xavier-uniform initialization.

use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Affine { w: Tensor, b: Tensor },
    Activation(Activation),
}

/// Ordered sequence of layers. Parameter count is fixed after construction.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Tape handles for one forward binding of a network's parameters, aligned
/// with `Network::params` order.
pub struct BoundNet {
    pub param_vars: Vec<Var>,
}

impl Network {
    /// MLP with the given layer dims: affine + activation per hidden layer,
    /// final affine left linear. Weights uniform in +/- sqrt(6/(fan_in+fan_out)).
    pub fn mlp(dims: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Network> {
        if dims.len() < 2 {
            return Err(Error::config("mlp needs at least input and output dims"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("zero layer dim in {:?}", dims)));
        }
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w_vals: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            layers.push(Layer::Affine {
                w: Tensor::matrix(fan_in, fan_out, w_vals)?,
                b: Tensor::zeros(vec![fan_out]),
            });
            if i + 2 < dims.len() {
                layers.push(Layer::Activation(activation));
            }
        }
        Ok(Network { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Network {
        Network { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        for l in &self.layers {
            if let Layer::Affine { w, .. } = l {
                return w.shape()[0];
            }
        }
        0
    }

    pub fn output_dim(&self) -> usize {
        for l in self.layers.iter().rev() {
            if let Layer::Affine { w, .. } = l {
                return w.shape()[1];
            }
        }
        0
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Layer::Affine { w, b } = l {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Layer::Affine { w, b } = l {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    /// Register every parameter as a differentiable tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundNet {
        let param_vars = self.params().iter().map(|p| tape.leaf(p, true)).collect();
        BoundNet { param_vars }
    }

    /// Forward through a bound parameter set; records the graph on the tape.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundNet, x: Var) -> Result<Var> {
        let mut cur = x;
        let mut pi = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Affine { .. } => {
                    let w = bound.param_vars[pi];
                    let b = bound.param_vars[pi + 1];
                    pi += 2;
                    cur = tape
                        .matmul(cur, w)
                        .map_err(|e| Error::shape(format!("layer {}: {}", li, e)))?;
                    cur = tape.add_row(cur, b)?;
                }
                Layer::Activation(Activation::Relu) => cur = tape.relu(cur),
                Layer::Activation(Activation::Tanh) => cur = tape.tanh(cur),
            }
        }
        Ok(cur)
    }

    /// Straight-line evaluation with no graph recording.
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let bound = BoundNet {
            param_vars: self.params().iter().map(|p| tape.constant(p)).collect(),
        };
        let out = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.tensor(out))
    }

    /// Pull parameter gradients from a backward pass, aligned with params order.
    pub fn grads_of(&self, bound: &BoundNet, grads: &Grads) -> Vec<Vec<f64>> {
        self.params()
            .iter()
            .zip(&bound.param_vars)
            .map(|(p, &v)| grads.of(v, p.len()))
            .collect()
    }

    /// Bitwise checksum over all parameters; used for freeze contracts.
    pub fn checksum(&self) -> u64 {
        self.params().iter().fold(0xcbf29ce484222325u64, |acc, p| {
            acc.rotate_left(7) ^ p.checksum()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close_rel, finite_diff};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_affine_passes_input_through() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(vec![2]);
        let net = Network::from_layers(vec![Layer::Affine { w, b }]);
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let y = net.forward_values(&x).unwrap();
        assert_eq!(y.values(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weights_repeat_bias() {
        let w = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let net = Network::from_layers(vec![Layer::Affine { w, b }]);
        let x = Tensor::matrix(2, 2, vec![3.0, 4.0, -1.0, 9.0]).unwrap();
        let y = net.forward_values(&x).unwrap();
        assert_eq!(y.row(0), &[0.5, -1.0, 2.0]);
        assert_eq!(y.row(1), &[0.5, -1.0, 2.0]);
    }

    /// Independent straight-line re-evaluation of a 2-layer MLP.
    fn manual_mlp_2layer(x: &[f64], n: usize, net: &Network) -> Vec<f64> {
        let params = net.params();
        let (w1, b1, w2, b2) = (params[0], params[1], params[2], params[3]);
        let (d_in, d_hid) = (w1.shape()[0], w1.shape()[1]);
        let d_out = w2.shape()[1];
        let mut out = Vec::with_capacity(n * d_out);
        for i in 0..n {
            let row = &x[i * d_in..(i + 1) * d_in];
            let mut h = vec![0.0; d_hid];
            for j in 0..d_hid {
                let mut s = b1.values()[j];
                for p in 0..d_in {
                    s += row[p] * w1.values()[p * d_hid + j];
                }
                h[j] = s.max(0.0);
            }
            for j in 0..d_out {
                let mut s = b2.values()[j];
                for p in 0..d_hid {
                    s += h[p] * w2.values()[p * d_out + j];
                }
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn random_mlp_matches_straight_line_reevaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = Network::mlp(&[4, 5, 2], Activation::Relu, &mut rng).unwrap();
        let x_vals: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::matrix(3, 4, x_vals.clone()).unwrap();
        let y = net.forward_values(&x).unwrap();
        let oracle = manual_mlp_2layer(&x_vals, 3, &net);
        assert_close_rel(y.values(), &oracle, 1e-12);
    }

    #[test]
    fn forward_dimension_mismatch_names_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::mlp(&[4, 3], Activation::Relu, &mut rng).unwrap();
        let x = Tensor::matrix(2, 5, vec![0.0; 10]).unwrap();
        let err = net.forward_values(&x).unwrap_err();
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::mlp(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.2, 0.0, -2.0]).unwrap();
        let y1 = net.forward_values(&x).unwrap();
        let y2 = net.forward_values(&x).unwrap();
        assert_eq!(y1.values(), y2.values());
    }

    #[test]
    fn linear_regression_grads_match_closed_form() {
        // loss = ||X w - y||^2 / n; grad_w = 2 X^T (X w - y) / n
        let x_vals = vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0];
        let y_vals = vec![1.0, -1.0, 2.0];
        let w_vals = vec![0.3, -0.7];
        let w = Tensor::matrix(2, 1, w_vals.clone()).unwrap();
        let b = Tensor::zeros(vec![1]);
        let net = Network::from_layers(vec![Layer::Affine { w, b }]);

        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let xv = tape.constant(&Tensor::matrix(3, 2, x_vals.clone()).unwrap());
        let out = net.forward(&mut tape, &bound, xv).unwrap();
        let yv = tape.constant(&Tensor::matrix(3, 1, y_vals.clone()).unwrap());
        let loss = tape.mse(out, yv).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = grads.of(bound.param_vars[0], 2);

        let mut analytic = vec![0.0; 2];
        for i in 0..3 {
            let pred = x_vals[i * 2] * w_vals[0] + x_vals[i * 2 + 1] * w_vals[1];
            let r = pred - y_vals[i];
            analytic[0] += 2.0 * x_vals[i * 2] * r / 3.0;
            analytic[1] += 2.0 * x_vals[i * 2 + 1] * r / 3.0;
        }
        assert_close_rel(&gw, &analytic, 1e-10);
    }

    #[test]
    fn mlp_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = Network::mlp(&[3, 6, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let x = Tensor::matrix(5, 3, (0..15).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
        let target =
            Tensor::matrix(5, 2, (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let xv = tape.constant(&x);
        let out = net.forward(&mut tape, &bound, xv).unwrap();
        let tv = tape.constant(&target);
        let loss = tape.mse(out, tv).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = net.grads_of(&bound, &grads);

        for (pi, p) in net.params().iter().enumerate() {
            let numeric = finite_diff(p.values(), |vals| {
                let mut perturbed = net.clone();
                perturbed.params_mut()[pi]
                    .values_mut()
                    .copy_from_slice(vals);
                let y = perturbed.forward_values(&x).unwrap();
                y.values()
                    .iter()
                    .zip(target.values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / y.len() as f64
            });
            assert_close_rel(&analytic[pi], &numeric, 1e-4);
        }
    }
}
