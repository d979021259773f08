//! The autoencoder shape model and the control-height regressor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{load_network, save_network, ModelKind};
use super::layers::Layer;
use super::network::{Network, NetworkSpec, ParamGrads};
use super::tensor::{mse, Tensor};
use crate::error::{Error, Result};

/// Losses recorded while pretraining a shape model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeModelStats {
    pub validation_loss: Option<f64>,
    pub untrained_validation_loss: Option<f64>,
}

/// Convolutional autoencoder used as a fixed plausibility prior.
#[derive(Debug, Clone)]
pub struct ShapeModel {
    net: Network,
    frozen: bool,
    pub stats: ShapeModelStats,
}

impl ShapeModel {
    /// Encoder: two stride-2 conv3d layers and a dense bottleneck; decoder: a
    /// dense layer back to the full volume followed by a sigmoid.
    pub fn default_spec(side: usize, latent: usize, seed: u64) -> Result<NetworkSpec> {
        if side < 4 || side % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "autoencoder side {side} must be a positive multiple of 4"
            )));
        }
        let q = side / 4;
        Ok(NetworkSpec {
            input_shape: vec![1, side, side, side],
            layers: vec![
                Layer::Conv3d {
                    in_channels: 1,
                    out_channels: 8,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                },
                Layer::Relu,
                Layer::Conv3d {
                    in_channels: 8,
                    out_channels: 16,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                },
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense {
                    inputs: 16 * q * q * q,
                    outputs: latent,
                },
                Layer::Relu,
                Layer::Dense {
                    inputs: latent,
                    outputs: side * side * side,
                },
                Layer::Reshape {
                    shape: vec![1, side, side, side],
                },
                Layer::Sigmoid,
            ],
            seed,
        })
    }

    pub fn new(spec: NetworkSpec) -> Result<Self> {
        Self::from_network(Network::new(spec)?)
    }

    pub fn from_network(net: Network) -> Result<Self> {
        if net.input_shape().len() != 4 || net.input_shape()[0] != 1 {
            return Err(Error::Shape(format!(
                "shape model input must be [1, d, h, w], got {:?}",
                net.input_shape()
            )));
        }
        if net.output_shape() != net.input_shape() {
            return Err(Error::Shape(format!(
                "decoder output {:?} differs from input {:?}",
                net.output_shape(),
                net.input_shape()
            )));
        }
        Ok(Self {
            net,
            frozen: false,
            stats: ShapeModelStats::default(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        self.net.input_shape()
    }

    /// `[d, h, w]` of the expected volume (z, y, x).
    pub fn volume_shape(&self) -> [usize; 3] {
        let s = self.input_shape();
        [s[1], s[2], s[3]]
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> Result<&mut Network> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.net)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn checksum(&self) -> String {
        self.net.checksum()
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward(x)?.0)
    }

    /// `mse(decode(encode(x)), x)` and its gradient with respect to `x`,
    /// including the direct dependence through the target.
    pub fn reconstruction_loss(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let (y, tape) = self.net.forward(x)?;
        let (loss, gy) = mse(&y, x)?;
        let mut gx = self.net.backward_input(&tape, &gy)?;
        for (g, d) in gx.data_mut().iter_mut().zip(gy.data()) {
            *g -= d;
        }
        Ok((loss, gx))
    }

    /// Loss and parameter gradients, for training.
    pub fn training_loss(&self, x: &Tensor) -> Result<(f64, ParamGrads)> {
        let (y, tape) = self.net.forward(x)?;
        let (loss, gy) = mse(&y, x)?;
        let (_, grads) = self.net.backward(&tape, &gy)?;
        Ok((loss, grads))
    }

    pub fn save(&self, json_path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "frozen": self.frozen,
            "stats": self.stats,
        });
        save_network(&self.net, ModelKind::ShapeModel, meta, json_path)
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        let (net, header) = load_network(json_path)?;
        if header.kind != ModelKind::ShapeModel {
            return Err(Error::Format(format!(
                "{} holds a {:?}, not a shape model",
                json_path.display(),
                header.kind
            )));
        }
        let mut model = Self::from_network(net)?;
        if let Some(stats) = header.metadata.get("stats") {
            model.stats = serde_json::from_value(stats.clone())?;
        }
        if header.metadata.get("frozen").and_then(|v| v.as_bool()) == Some(true) {
            model.freeze();
        }
        Ok(model)
    }
}

/// Maps a downsampled vertebra mask to one height offset (mm) per control point.
#[derive(Debug, Clone)]
pub struct RegressorModel {
    net: Network,
}

impl RegressorModel {
    /// Two stride-2 conv3d layers and two dense layers ending in `n_controls`
    /// linear outputs.
    pub fn default_spec(side: usize, n_controls: usize, seed: u64) -> Result<NetworkSpec> {
        if side < 4 || side % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "regressor side {side} must be a positive multiple of 4"
            )));
        }
        let q = side / 4;
        Ok(NetworkSpec {
            input_shape: vec![1, side, side, side],
            layers: vec![
                Layer::Conv3d {
                    in_channels: 1,
                    out_channels: 4,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                },
                Layer::Relu,
                Layer::Conv3d {
                    in_channels: 4,
                    out_channels: 8,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                },
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense {
                    inputs: 8 * q * q * q,
                    outputs: 64,
                },
                Layer::Relu,
                Layer::Dense {
                    inputs: 64,
                    outputs: n_controls,
                },
            ],
            seed,
        })
    }

    /// Builds the network and zeroes the output layer so the initial
    /// prediction is the reference plane.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let mut net = Network::new(spec)?;
        if let Some(Layer::Dense { inputs, outputs }) = net.spec().layers.last().cloned() {
            let n = inputs * outputs + outputs;
            let len = net.params().len();
            net.params_mut()[len - n..].fill(0.0);
        }
        Self::from_network(net)
    }

    pub fn from_network(net: Network) -> Result<Self> {
        if net.output_shape().len() != 1 {
            return Err(Error::Shape(format!(
                "regressor output must be a vector, got {:?}",
                net.output_shape()
            )));
        }
        Ok(Self { net })
    }

    pub fn n_controls(&self) -> usize {
        self.net.output_shape()[0]
    }

    pub fn input_shape(&self) -> &[usize] {
        self.net.input_shape()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    /// Height offsets relative to the reference plane.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.forward(x)?.0.into_data())
    }

    pub fn save(&self, json_path: &Path) -> Result<()> {
        save_network(
            &self.net,
            ModelKind::Regressor,
            serde_json::Value::Null,
            json_path,
        )
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        let (net, header) = load_network(json_path)?;
        if header.kind != ModelKind::Regressor {
            return Err(Error::Format(format!(
                "{} holds a {:?}, not a regressor",
                json_path.display(),
                header.kind
            )));
        }
        Self::from_network(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_input(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![1, 4, 4, 4],
            (0..64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_specs_compose() {
        let cae = ShapeModel::new(ShapeModel::default_spec(32, 64, 0).unwrap()).unwrap();
        assert_eq!(cae.input_shape(), &[1, 32, 32, 32]);
        let reg = RegressorModel::new(RegressorModel::default_spec(16, 100, 0).unwrap()).unwrap();
        assert_eq!(reg.n_controls(), 100);
        let out = reg.predict(&Tensor::zeros(vec![1, 16, 16, 16])).unwrap();
        assert_eq!(out, vec![0.0; 100]);
        assert!(ShapeModel::default_spec(6, 8, 0).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ShapeModel::default_spec(8, 4, 17).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<NetworkSpec>(&text).unwrap(), spec);
    }

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        let model = ShapeModel::new(ShapeModel::default_spec(4, 6, 3).unwrap()).unwrap();
        let x = toy_input(5);
        let (_, g) = model.reconstruction_loss(&x).unwrap();
        let h = 1e-4;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (model.reconstruction_loss(&xp).unwrap().0
                - model.reconstruction_loss(&xm).unwrap().0)
                / (2.0 * h);
            let an = g.data()[i];
            assert!(
                (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3),
                "voxel {i}: fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn frozen_model_is_pure_and_immutable() {
        let mut model = ShapeModel::new(ShapeModel::default_spec(4, 6, 3).unwrap()).unwrap();
        model.freeze();
        let sum = model.checksum();
        let x = toy_input(1);
        let a = model.reconstruction_loss(&x).unwrap().0;
        let b = model.reconstruction_loss(&x).unwrap().0;
        assert_eq!(a, b);
        assert!(matches!(model.network_mut(), Err(Error::Frozen)));
        assert_eq!(model.checksum(), sum);
    }

    #[test]
    fn shape_model_needs_matching_decoder() {
        let spec = NetworkSpec {
            input_shape: vec![1, 2, 2, 2],
            layers: vec![Layer::Flatten],
            seed: 0,
        };
        assert!(ShapeModel::new(spec).is_err());
    }
}
