//! Feature-extraction trunks. Only the desk-scale CNN ships; other trunks
//! (pretrained ResNets and the like) plug in as new `BackboneState` variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conv::{conv_backward, conv_forward, ConvSpec};
use crate::error::{Error, Result};

pub const DESK_CNN_ID: &str = "desk-cnn";

/// Activations kept from a trunk forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct TrunkPass {
    /// `layers[i]` is the input of conv `i`; the last entry is the trunk output.
    pub layers: Vec<Vec<f64>>,
    pub sides: Vec<usize>,
}

impl TrunkPass {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("trunk pass has an output")
    }

    pub fn out_side(&self) -> usize {
        *self.sides.last().expect("trunk pass has an output")
    }
}

pub trait Backbone {
    fn id(&self) -> &str;
    fn out_channels(&self) -> usize;
    fn out_side(&self, input_side: usize) -> Option<usize>;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// `pixels` is a standardized CHW image with three channels.
    fn forward(&self, pixels: &[f64], side: usize) -> Result<TrunkPass>;
    /// Accumulates into `grad_params` given the gradient at the trunk output.
    fn backward(&self, pass: &TrunkPass, grad_out: &[f64], grad_params: &mut [f64]);
}

/// Strided conv + ReLU blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskCnn {
    layers: Vec<ConvSpec>,
    params: Vec<f64>,
}

impl DeskCnn {
    /// Four blocks taking 224x224x3 to 7x7x32.
    pub fn default_layers() -> Vec<ConvSpec> {
        vec![
            ConvSpec { in_channels: 3, out_channels: 8, kernel: 8, stride: 8, padding: 0 },
            ConvSpec { in_channels: 8, out_channels: 16, kernel: 2, stride: 2, padding: 0 },
            ConvSpec { in_channels: 16, out_channels: 32, kernel: 2, stride: 2, padding: 0 },
            ConvSpec { in_channels: 32, out_channels: 32, kernel: 1, stride: 1, padding: 0 },
        ]
    }

    /// He-normal weights and zero biases from a fixed seed.
    pub fn init(layers: Vec<ConvSpec>, seed: u64) -> Result<Self> {
        validate_layers(&layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layers.iter().map(ConvSpec::param_len).sum());
        for spec in &layers {
            let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            params.extend((0..spec.weight_len()).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, spec.out_channels));
        }
        Ok(Self { layers, params })
    }

    pub fn from_parts(layers: Vec<ConvSpec>, params: Vec<f64>) -> Result<Self> {
        validate_layers(&layers)?;
        let expected: usize = layers.iter().map(ConvSpec::param_len).sum();
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "desk CNN expects {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self { layers, params })
    }

    pub fn layers(&self) -> &[ConvSpec] {
        &self.layers
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = acc;
                acc += l.param_len();
                o
            })
            .collect()
    }
}

fn validate_layers(layers: &[ConvSpec]) -> Result<()> {
    let Some(first) = layers.first() else {
        return Err(Error::Config("trunk needs at least one conv layer".into()));
    };
    if first.in_channels != 3 {
        return Err(Error::Config(format!(
            "trunk input must have 3 channels, first layer takes {}",
            first.in_channels
        )));
    }
    for pair in layers.windows(2) {
        if pair[0].out_channels != pair[1].in_channels {
            return Err(Error::Config(format!(
                "trunk channel mismatch: {} -> {}",
                pair[0].out_channels, pair[1].in_channels
            )));
        }
    }
    Ok(())
}

impl Backbone for DeskCnn {
    fn id(&self) -> &str {
        DESK_CNN_ID
    }

    fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    fn out_side(&self, input_side: usize) -> Option<usize> {
        self.layers.iter().try_fold(input_side, |side, l| l.out_side(side))
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, pixels: &[f64], side: usize) -> Result<TrunkPass> {
        if pixels.len() != 3 * side * side {
            return Err(Error::Shape(format!(
                "trunk expects 3x{side}x{side} input, got {} values",
                pixels.len()
            )));
        }
        let offsets = self.offsets();
        let mut layers = vec![pixels.to_vec()];
        let mut sides = vec![side];
        for (i, spec) in self.layers.iter().enumerate() {
            let s = *sides.last().unwrap();
            if spec.out_side(s).is_none() {
                return Err(Error::Shape(format!("trunk.conv{i}: input side {s} too small")));
            }
            let mut out = Vec::new();
            let params = &self.params[offsets[i]..offsets[i] + spec.param_len()];
            let (oh, _) = conv_forward(spec, params, layers.last().unwrap(), s, s, &mut out);
            for v in out.iter_mut() {
                *v = v.max(0.0);
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: format!("trunk.conv{i}") });
            }
            layers.push(out);
            sides.push(oh);
        }
        Ok(TrunkPass { layers, sides })
    }

    fn backward(&self, pass: &TrunkPass, grad_out: &[f64], grad_params: &mut [f64]) {
        let offsets = self.offsets();
        let mut grad = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let spec = &self.layers[i];
            let out = &pass.layers[i + 1];
            for (g, &o) in grad.iter_mut().zip(out) {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }
            let range = offsets[i]..offsets[i] + spec.param_len();
            let side = pass.sides[i];
            let mut grad_in = Vec::new();
            conv_backward(
                spec,
                &self.params[range.clone()],
                &pass.layers[i],
                side,
                side,
                &grad,
                &mut grad_params[range],
                (i > 0).then_some(&mut grad_in),
            );
            grad = grad_in;
        }
    }
}

/// Serializable trunk state stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackboneState {
    DeskCnn(DeskCnn),
}

impl BackboneState {
    fn inner(&self) -> &dyn Backbone {
        match self {
            BackboneState::DeskCnn(b) => b,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Backbone {
        match self {
            BackboneState::DeskCnn(b) => b,
        }
    }
}

impl Backbone for BackboneState {
    fn id(&self) -> &str {
        self.inner().id()
    }

    fn out_channels(&self) -> usize {
        self.inner().out_channels()
    }

    fn out_side(&self, input_side: usize) -> Option<usize> {
        self.inner().out_side(input_side)
    }

    fn params(&self) -> &[f64] {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.inner_mut().params_mut()
    }

    fn forward(&self, pixels: &[f64], side: usize) -> Result<TrunkPass> {
        self.inner().forward(pixels, side)
    }

    fn backward(&self, pass: &TrunkPass, grad_out: &[f64], grad_params: &mut [f64]) {
        self.inner().backward(pass, grad_out, grad_params)
    }
}
