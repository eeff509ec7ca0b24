use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ParamView, ParamViewMut, Parameters, SeededRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Affine layer `y = act(W x + b)` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Dense {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
            activation,
        }
    }

    /// Gaussian init scaled by fan-in: variance `2/fan_in` for ReLU layers
    /// (He), `1/fan_in` otherwise. Biases start at zero.
    pub fn init(input: usize, output: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        let gain = match activation {
            Activation::Relu => 2.0,
            Activation::Identity => 1.0,
        };
        let normal = Normal::new(0.0, (gain / input as f64).sqrt()).expect("finite std");
        let weight = Array2::from_shape_simple_fn((output, input), || normal.sample(rng));
        Dense {
            weight,
            bias: Array1::zeros(output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// `x Wᵀ + b`, always in row-major layout.
    fn affine(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = Array2::from_shape_fn((x.nrows(), self.weight.nrows()), |(_, j)| self.bias[j]);
        general_mat_mul(1.0, &x, &self.weight.t(), 1.0, &mut z);
        z
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Stack of dense layers evaluated on row-major batches (`batch × features`).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Activations cached by [`DenseNet::forward`] and consumed by
/// [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::dim(format!("layer {i} bias"), layer.output_dim(), layer.bias.len()));
            }
            if i > 0 && layers[i - 1].output_dim() != layer.input_dim() {
                return Err(Error::dim(
                    format!("layer {i} input"),
                    layers[i - 1].output_dim(),
                    layer.input_dim(),
                ));
            }
        }
        Ok(DenseNet { layers })
    }

    /// `sizes = [in, h1, ..., out]`; hidden layers use ReLU, the last layer
    /// uses `output`.
    pub fn mlp(sizes: &[usize], output: Activation, rng: &mut SeededRng) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig(format!("invalid layer sizes {sizes:?}")));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { output } else { Activation::Relu };
                Dense::init(w[0], w[1], act, rng)
            })
            .collect();
        DenseNet::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Same architecture, all parameters zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        DenseNet {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim(), l.activation))
                .collect(),
        }
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), cols));
        }
        Ok(())
    }

    /// Batched forward pass keeping what backward needs.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Trace> {
        self.check_input(input.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = input.to_owned();
        for layer in &self.layers {
            let z = layer.affine(current.view());
            let out = match layer.activation {
                Activation::Relu => z.mapv(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            inputs.push(current);
            pre.push(z);
            current = out;
        }
        Ok(Trace {
            inputs,
            pre,
            output: current,
        })
    }

    /// Forward pass without caching.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut current = input.to_owned();
        for layer in &self.layers {
            let mut z = layer.affine(current.view());
            if layer.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            current = z;
        }
        Ok(current)
    }

    pub fn forward_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("contiguous row");
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Reverse pass: given `dL/d output` for the batch in `trace`, returns the
    /// parameter gradients (as a network of the same shape) and `dL/d input`.
    pub fn backward(&self, trace: &Trace, upstream: ArrayView2<f64>) -> Result<(DenseNet, Array2<f64>)> {
        if trace.inputs.len() != self.layers.len() {
            return Err(Error::dim("trace layers", self.layers.len(), trace.inputs.len()));
        }
        for (i, (layer, x)) in self.layers.iter().zip(&trace.inputs).enumerate() {
            if x.ncols() != layer.input_dim() {
                return Err(Error::dim(format!("trace layer {i}"), layer.input_dim(), x.ncols()));
            }
        }
        if upstream.dim() != trace.output.dim() {
            return Err(Error::dim("upstream gradient columns", trace.output.ncols(), upstream.ncols()));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                ndarray::Zip::from(&mut delta)
                    .and(&trace.pre[l])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            let weight = delta.t().dot(&trace.inputs[l]);
            let bias = delta.sum_axis(Axis(0));
            let next = delta.dot(&layer.weight);
            grads.push(Dense {
                weight,
                bias,
                activation: layer.activation,
            });
            delta = next;
        }
        grads.reverse();
        Ok((DenseNet { layers: grads }, delta))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

impl Parameters for DenseNet {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push(ParamView {
                name: format!("layer{i}.weight"),
                shape: l.weight.shape().to_vec(),
                data: l.weight.as_slice().expect("standard layout"),
            });
            out.push(ParamView {
                name: format!("layer{i}.bias"),
                shape: vec![l.bias.len()],
                data: l.bias.as_slice().expect("standard layout"),
            });
        }
        out
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter_mut().enumerate() {
            let shape = l.weight.shape().to_vec();
            out.push(ParamViewMut {
                name: format!("layer{i}.weight"),
                shape,
                data: l.weight.as_slice_mut().expect("standard layout"),
            });
            out.push(ParamViewMut {
                name: format!("layer{i}.bias"),
                shape: vec![l.bias.len()],
                data: l.bias.as_slice_mut().expect("standard layout"),
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_net(sizes: &[usize], seed: u64) -> DenseNet {
        let mut rng = SeededRng::new(seed);
        let mut net = DenseNet::mlp(sizes, Activation::Identity, &mut rng).unwrap();
        // non-zero biases so the oracle sees them
        for layer in net.layers_mut() {
            layer.bias.mapv_inplace(|_| rng.standard_normal() * 0.3);
        }
        net
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Dense {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
            activation: Activation::Identity,
        };
        let net = DenseNet::new(vec![layer]).unwrap();
        assert_eq!(net.forward_one(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let mut layer = Dense::zeros(3, 2, Activation::Identity);
        layer.bias = array![0.5, -1.5];
        let net = DenseNet::new(vec![layer]).unwrap();
        assert_eq!(net.forward_one(&[7.0, -2.0, 3.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn forward_matches_naive_matmul_chain() {
        let net = random_net(&[4, 6, 5, 3], 11);
        let x = [0.3, -1.2, 2.0, 0.7];
        // scalar triple loop, independent of ndarray
        let mut h = x.to_vec();
        for layer in net.layers() {
            let mut next = vec![0.0; layer.output_dim()];
            for (o, slot) in next.iter_mut().enumerate() {
                let mut acc = layer.bias[o];
                for (i, &hi) in h.iter().enumerate() {
                    acc += layer.weight[(o, i)] * hi;
                }
                *slot = match layer.activation {
                    Activation::Relu => acc.max(0.0),
                    Activation::Identity => acc,
                };
            }
            h = next;
        }
        let got = net.forward_one(&x).unwrap();
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn input_dimension_is_checked() {
        let net = random_net(&[3, 2], 1);
        assert!(matches!(net.forward_one(&[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let a = Dense::zeros(3, 4, Activation::Relu);
        let b = Dense::zeros(5, 1, Activation::Identity);
        assert!(DenseNet::new(vec![a, b]).is_err());
    }

    #[test]
    fn linear_gradient_of_first_output() {
        let mut rng = SeededRng::new(3);
        let layer = Dense::init(3, 2, Activation::Identity, &mut rng);
        let net = DenseNet::new(vec![layer]).unwrap();
        let x = array![[1.5, -2.0, 0.25]];
        let trace = net.forward(x.view()).unwrap();
        let (grads, dx) = net.backward(&trace, array![[1.0, 0.0]].view()).unwrap();
        let g = &grads.layers()[0];
        assert_eq!(g.weight.row(0).to_vec(), vec![1.5, -2.0, 0.25]);
        assert_eq!(g.weight.row(1).to_vec(), vec![0.0, 0.0, 0.0]);
        assert_eq!(g.bias.to_vec(), vec![1.0, 0.0]);
        assert_eq!(dx.row(0).to_vec(), net.layers()[0].weight.row(0).to_vec());
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let mut hidden = Dense::zeros(1, 1, Activation::Relu);
        hidden.weight[(0, 0)] = 1.0;
        hidden.bias[0] = -5.0;
        let mut out = Dense::zeros(1, 1, Activation::Identity);
        out.weight[(0, 0)] = 2.0;
        let net = DenseNet::new(vec![hidden, out]).unwrap();
        let trace = net.forward(array![[1.0]].view()).unwrap();
        let (grads, dx) = net.backward(&trace, array![[1.0]].view()).unwrap();
        assert_eq!(grads.layers()[0].weight[(0, 0)], 0.0);
        assert_eq!(grads.layers()[0].bias[0], 0.0);
        assert_eq!(dx[(0, 0)], 0.0);
    }

    #[test]
    fn backward_matches_central_differences() {
        let net = random_net(&[4, 7, 3], 5);
        let x = array![[0.2, -0.4, 1.1, 0.9], [-1.0, 0.5, 0.3, -0.2]];
        // loss = sum(c ⊙ output)
        let coef = array![[0.3, -1.0, 0.7], [1.2, 0.1, -0.5]];
        let loss = |n: &DenseNet, x: &Array2<f64>| (n.predict(x.view()).unwrap() * &coef).sum();
        let trace = net.forward(x.view()).unwrap();
        let (grads, dx) = net.backward(&trace, coef.view()).unwrap();
        let h = 1e-5;
        let analytic: Vec<f64> = grads.params().iter().flat_map(|p| p.data.to_vec()).collect();
        let mut k = 0;
        let n_tensors = net.params().len();
        for t in 0..n_tensors {
            let len = net.params()[t].data.len();
            for i in 0..len {
                let mut plus = net.clone();
                plus.params_mut()[t].data[i] += h;
                let mut minus = net.clone();
                minus.params_mut()[t].data[i] -= h;
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
                let a = analytic[k];
                assert!((a - fd).abs() <= 1e-6f64.max(1e-4 * a.abs().max(fd.abs())), "param {t}/{i}: {a} vs {fd}");
                k += 1;
            }
        }
        for r in 0..2 {
            for c in 0..4 {
                let mut xp = x.clone();
                xp[(r, c)] += h;
                let mut xm = x.clone();
                xm[(r, c)] -= h;
                let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
                assert!((dx[(r, c)] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let net = random_net(&[3, 5, 2], 8);
        let x = array![[0.1, 0.2, 0.3]];
        let t1 = net.forward(x.view()).unwrap();
        let t2 = net.forward(x.view()).unwrap();
        assert_eq!(t1.output(), t2.output());
        let up = array![[1.0, -1.0]];
        assert_eq!(net.backward(&t1, up.view()).unwrap(), net.backward(&t2, up.view()).unwrap());
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let a = random_net(&[3, 5, 2], 1);
        let b = random_net(&[4, 5, 2], 1);
        let trace = b.forward(array![[0.0, 0.0, 0.0, 0.0]].view()).unwrap();
        assert!(a.backward(&trace, array![[1.0, 1.0]].view()).is_err());
    }
}
