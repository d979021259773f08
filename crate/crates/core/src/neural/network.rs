//! Sequential networks with a layer-level tape for reverse-mode gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{dense_backward, dense_forward, ConvGeom, Layer};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::util::sha256_hex;

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl NetworkSpec {
    /// Activation shapes: input first, then the output of every layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().expect("non-empty"))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let (w, b) = l.param_counts();
                w + b
            })
            .sum()
    }
}

/// Record of one forward pass: every layer's input plus the final output.
#[derive(Debug, Clone)]
pub struct Tape {
    network_id: u64,
    version: u64,
    activations: Vec<Tensor>,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.activations
            .last()
            .expect("tape has the input at least")
    }
}

/// Flat gradient buffer laid out like [`Network::params`].
pub type ParamGrads = Vec<f64>;

#[derive(Debug)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<Vec<usize>>,
    /// Start of each layer's parameters in `params`.
    offsets: Vec<usize>,
    params: Vec<f64>,
    id: u64,
    version: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            offsets: self.offsets.clone(),
            params: self.params.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl Network {
    /// Builds the network with LeCun-uniform weights (`±sqrt(3/fan_in)`) and
    /// zero biases, drawn from ChaCha8 seeded with `spec.seed`.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::with_capacity(spec.param_count());
        for layer in &spec.layers {
            let (nw, nb) = layer.param_counts();
            if nw > 0 {
                let bound = (3.0 / layer.fan_in() as f64).sqrt();
                params.extend((0..nw).map(|_| rng.random_range(-bound..bound)));
                params.extend(std::iter::repeat_n(0.0, nb));
            }
        }
        Self::with_params(spec, params)
    }

    pub fn with_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        let shapes = spec.shapes()?;
        if params.len() != spec.param_count() {
            return Err(Error::Length {
                expected: spec.param_count(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        let mut offsets = Vec::with_capacity(spec.layers.len());
        let mut at = 0;
        for layer in &spec.layers {
            offsets.push(at);
            let (w, b) = layer.param_counts();
            at += w + b;
        }
        Ok(Self {
            spec,
            shapes,
            offsets,
            params,
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    /// SHA-256 of the parameters as little-endian `f64`.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    fn layer_params(&self, i: usize) -> (&[f64], &[f64]) {
        let (nw, nb) = self.spec.layers[i].param_counts();
        let at = self.offsets[i];
        (
            &self.params[at..at + nw],
            &self.params[at + nw..at + nw + nb],
        )
    }

    fn conv_geom(&self, i: usize) -> ConvGeom {
        let Layer::Conv3d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = self.spec.layers[i]
        else {
            unreachable!("conv_geom on a non-conv layer")
        };
        let inp = &self.shapes[i];
        let out = &self.shapes[i + 1];
        ConvGeom {
            ic: in_channels,
            oc: out_channels,
            k: kernel,
            s: stride,
            p: padding,
            input: [inp[1], inp[2], inp[3]],
            output: [out[1], out[2], out[3]],
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tape)> {
        if input.shape() != self.input_shape() {
            return Err(Error::Shape(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape(),
                input.shape()
            )));
        }
        let mut activations = Vec::with_capacity(self.spec.layers.len() + 1);
        activations.push(input.clone());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let x = activations.last().expect("non-empty");
            let out_shape = self.shapes[i + 1].clone();
            let y = match layer {
                Layer::Dense { .. } => {
                    let (w, b) = self.layer_params(i);
                    let mut y = Tensor::zeros(out_shape);
                    dense_forward(x.data(), w, b, y.data_mut());
                    y
                }
                Layer::Conv3d { .. } => {
                    let (w, b) = self.layer_params(i);
                    let mut y = Tensor::zeros(out_shape);
                    self.conv_geom(i).forward(x.data(), w, b, y.data_mut());
                    y
                }
                Layer::Relu => {
                    Tensor::new(out_shape, x.data().iter().map(|v| v.max(0.0)).collect())?
                }
                Layer::Sigmoid => Tensor::new(
                    out_shape,
                    x.data().iter().map(|&v| crate::voxel::sigmoid(v)).collect(),
                )?,
                Layer::Flatten | Layer::Reshape { .. } => x.clone().reshaped(out_shape)?,
            };
            if !y.all_finite() {
                return Err(Error::NonFiniteLayer {
                    layer: i,
                    kind: layer.kind(),
                });
            }
            activations.push(y);
        }
        let tape = Tape {
            network_id: self.id,
            version: self.version,
            activations,
        };
        Ok((tape.output().clone(), tape))
    }

    /// Gradients of `⟨output, output_grad⟩` with respect to the input and parameters.
    pub fn backward(&self, tape: &Tape, output_grad: &Tensor) -> Result<(Tensor, ParamGrads)> {
        let mut grads = vec![0.0; self.params.len()];
        let gx = self.backprop(tape, output_grad, Some(&mut grads))?;
        Ok((gx, grads))
    }

    /// Input gradient only; skips the parameter-gradient accumulation.
    pub fn backward_input(&self, tape: &Tape, output_grad: &Tensor) -> Result<Tensor> {
        self.backprop(tape, output_grad, None)
    }

    fn backprop(
        &self,
        tape: &Tape,
        output_grad: &Tensor,
        mut grads: Option<&mut [f64]>,
    ) -> Result<Tensor> {
        if tape.network_id != self.id || tape.version != self.version {
            return Err(Error::StaleTape);
        }
        if output_grad.shape() != self.output_shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                output_grad.shape(),
                self.output_shape()
            )));
        }
        let mut g = output_grad.clone();
        for (i, layer) in self.spec.layers.iter().enumerate().rev() {
            let x = &tape.activations[i];
            let in_shape = self.shapes[i].clone();
            g = match layer {
                Layer::Dense { .. } | Layer::Conv3d { .. } => {
                    let (w, _) = self.layer_params(i);
                    let mut gx = Tensor::zeros(in_shape);
                    let slot = grads.as_deref_mut().map(|all| {
                        let (nw, nb) = layer.param_counts();
                        let at = self.offsets[i];
                        all[at..at + nw + nb].split_at_mut(nw)
                    });
                    if matches!(layer, Layer::Dense { .. }) {
                        dense_backward(x.data(), w, g.data(), gx.data_mut(), slot);
                    } else {
                        self.conv_geom(i)
                            .backward(x.data(), w, g.data(), gx.data_mut(), slot);
                    }
                    gx
                }
                Layer::Relu => Tensor::new(
                    in_shape,
                    x.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                )?,
                Layer::Sigmoid => {
                    let y = &tape.activations[i + 1];
                    Tensor::new(
                        in_shape,
                        y.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&yv, &gv)| gv * yv * (1.0 - yv))
                            .collect(),
                    )?
                }
                Layer::Flatten | Layer::Reshape { .. } => g.reshaped(in_shape)?,
            };
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::ProptestConfig;
    use proptest::proptest;

    fn tiny_spec(seed: u64) -> NetworkSpec {
        NetworkSpec {
            input_shape: vec![1, 4, 4, 4],
            layers: vec![
                Layer::Conv3d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                },
                Layer::Relu,
                Layer::Conv3d {
                    in_channels: 2,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Layer::Flatten,
                Layer::Dense {
                    inputs: 16,
                    outputs: 5,
                },
                Layer::Sigmoid,
                Layer::Dense {
                    inputs: 5,
                    outputs: 3,
                },
            ],
            seed,
        }
    }

    fn input(seed: u64, shape: Vec<usize>) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn zero_dense_gives_zero() {
        let spec = NetworkSpec {
            input_shape: vec![3],
            layers: vec![Layer::Dense {
                inputs: 3,
                outputs: 2,
            }],
            seed: 0,
        };
        let net = Network::with_params(spec, vec![0.0; 8]).unwrap();
        let (y, _) = net.forward(&input(1, vec![3])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_of_negative_input_is_zero() {
        let spec = NetworkSpec {
            input_shape: vec![4],
            layers: vec![Layer::Relu],
            seed: 0,
        };
        let net = Network::new(spec).unwrap();
        let x = Tensor::new(vec![4], vec![-1.0, -0.5, -3.0, -1e-9]).unwrap();
        assert!(net.forward(&x).unwrap().0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_net_matches_direct_arithmetic() {
        let spec = NetworkSpec {
            input_shape: vec![3],
            layers: vec![
                Layer::Dense {
                    inputs: 3,
                    outputs: 4,
                },
                Layer::Relu,
                Layer::Dense {
                    inputs: 4,
                    outputs: 2,
                },
            ],
            seed: 9,
        };
        let net = Network::new(spec).unwrap();
        let x = input(2, vec![3]);
        let (y, _) = net.forward(&x).unwrap();
        let p = net.params();
        let (w1, rest) = p.split_at(12);
        let (b1, rest) = rest.split_at(4);
        let (w2, b2) = rest.split_at(8);
        let xs = x.data();
        let mut hidden = [0.0; 4];
        for o in 0..4 {
            let mut s = b1[o];
            for i in 0..3 {
                s += w1[o * 3 + i] * xs[i];
            }
            hidden[o] = if s > 0.0 { s } else { 0.0 };
        }
        for o in 0..2 {
            let mut s = b2[o];
            for i in 0..4 {
                s += w2[o * 4 + i] * hidden[i];
            }
            assert!((s - y.data()[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_network_passes_gradient_through() {
        let spec = NetworkSpec {
            input_shape: vec![2, 3],
            layers: vec![Layer::Flatten, Layer::Reshape { shape: vec![2, 3] }],
            seed: 0,
        };
        let net = Network::new(spec).unwrap();
        let x = input(3, vec![2, 3]);
        let (_, tape) = net.forward(&x).unwrap();
        let g = input(4, vec![2, 3]);
        let (gx, pg) = net.backward(&tape, &g).unwrap();
        assert_eq!(gx, g);
        assert!(pg.is_empty());
    }

    #[test]
    fn linear_network_gradient_is_linear_in_output_grad() {
        let spec = NetworkSpec {
            input_shape: vec![4],
            layers: vec![
                Layer::Dense {
                    inputs: 4,
                    outputs: 3,
                },
                Layer::Dense {
                    inputs: 3,
                    outputs: 2,
                },
            ],
            seed: 5,
        };
        let net = Network::new(spec).unwrap();
        let (_, tape) = net.forward(&input(1, vec![4])).unwrap();
        let g = input(2, vec![2]);
        let (gx1, p1) = net.backward(&tape, &g).unwrap();
        let (gx3, p3) = net.backward(&tape, &g.scaled(3.0)).unwrap();
        for (a, b) in gx1.data().iter().zip(gx3.data()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
        for (a, b) in p1.iter().zip(&p3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = Network::new(tiny_spec(1)).unwrap();
        let other = net.clone();
        let x = input(1, vec![1, 4, 4, 4]);
        let (y, tape) = net.forward(&x).unwrap();
        assert!(matches!(other.backward(&tape, &y), Err(Error::StaleTape)));
        net.params_mut()[0] += 1.0;
        assert!(matches!(net.backward(&tape, &y), Err(Error::StaleTape)));
    }

    #[test]
    fn forward_checks_shape_and_finiteness() {
        let net = Network::new(tiny_spec(1)).unwrap();
        assert!(matches!(
            net.forward(&Tensor::zeros(vec![1, 4, 4, 5])),
            Err(Error::Shape(_))
        ));
        let spec = NetworkSpec {
            input_shape: vec![2],
            layers: vec![
                Layer::Relu,
                Layer::Dense {
                    inputs: 2,
                    outputs: 1,
                },
            ],
            seed: 0,
        };
        let big = Network::with_params(spec, vec![1e300, 1e300, 0.0]).unwrap();
        let x = Tensor::new(vec![2], vec![1e10, 1e10]).unwrap();
        assert!(matches!(
            big.forward(&x),
            Err(Error::NonFiniteLayer {
                layer: 1,
                kind: "dense"
            })
        ));
    }

    #[test]
    fn initialization_is_seeded() {
        let a = Network::new(tiny_spec(3)).unwrap();
        let b = Network::new(tiny_spec(3)).unwrap();
        let c = Network::new(tiny_spec(4)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    fn check_gradients(spec: NetworkSpec, seed: u64) {
        let net = Network::new(spec.clone()).unwrap();
        let x = input(seed, spec.input_shape.clone());
        let (y, tape) = net.forward(&x).unwrap();
        let gy = input(seed + 100, y.shape().to_vec());
        let (gx, gp) = net.backward(&tape, &gy).unwrap();
        let h = 1e-4;
        let objective = |n: &Network, x: &Tensor| dot(&n.forward(x).unwrap().0, &gy);
        let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-2);
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (objective(&net, &xp) - objective(&net, &xm)) / (2.0 * h);
            assert!(
                close(fd, gx.data()[i]),
                "input {i}: fd {fd} vs {}",
                gx.data()[i]
            );
        }
        for i in 0..net.params().len() {
            let mut np = net.clone();
            let mut nm = net.clone();
            np.params_mut()[i] += h;
            nm.params_mut()[i] -= h;
            let fd = (objective(&np, &x) - objective(&nm, &x)) / (2.0 * h);
            assert!(close(fd, gp[i]), "param {i}: fd {fd} vs {}", gp[i]);
        }
    }

    #[test]
    fn tiny_network_gradients_match_finite_differences() {
        check_gradients(tiny_spec(7), 7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn every_layer_type_has_exact_gradients(seed in 0u64..10_000) {
            // relu kinks make finite differences unreliable only at exact zeros,
            // which random inputs avoid almost surely
            let spec = NetworkSpec {
                input_shape: vec![2, 3, 4, 3],
                layers: vec![
                    Layer::Conv3d { in_channels: 2, out_channels: 2, kernel: 2, stride: 1, padding: 1 },
                    Layer::Sigmoid,
                    Layer::Conv3d { in_channels: 2, out_channels: 1, kernel: 3, stride: 2, padding: 1 },
                    Layer::Relu,
                    Layer::Flatten,
                    Layer::Dense { inputs: 12, outputs: 6 },
                    Layer::Reshape { shape: vec![2, 3] },
                    Layer::Sigmoid,
                ],
                seed,
            };
            check_gradients(spec, seed);
        }
    }
}
