//! Small multilayer perceptron producing the feature vector `f ∈ R^M`.

use rand::Rng;

use crate::error::{KmclError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Pass inputs through unchanged (`input_dim` must equal `feature_dim`).
    pub identity: bool,
    /// Apply the rectifier after the last layer as well.
    pub output_relu: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 32,
            hidden: vec![64, 64],
            feature_dim: 32,
            identity: false,
            output_relu: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(KmclError::invalid("encoder", "layer widths must be positive"));
        }
        if self.identity && self.input_dim != self.feature_dim {
            return Err(KmclError::invalid(
                "encoder.identity",
                format!(
                    "identity encoder needs input_dim == feature_dim ({} != {})",
                    self.input_dim, self.feature_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        if self.identity {
            return vec![self.input_dim];
        }
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.feature_dim);
        w
    }
}

/// Affine layer with a row-major `outputs × inputs` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.bias
            .iter()
            .enumerate()
            .map(|(o, b)| {
                self.weight[o * self.inputs..(o + 1) * self.inputs]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + b
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<Dense>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrace {
    /// Input to each layer; `inputs[0]` is the sample itself.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pub pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Encoder {
    pub fn zeros(config: EncoderConfig) -> Self {
        let widths = config.widths();
        let layers = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Encoder { config, layers }
    }

    /// Weights and biases `~ U(-1/√fan_in, 1/√fan_in)`.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Self {
        let mut enc = Self::zeros(config);
        for layer in &mut enc.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *v = rng.random_range(-bound..bound);
            }
        }
        enc
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.config.output_relu
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.trace(x).map(|t| t.output)
    }

    pub fn trace(&self, x: &[f64]) -> Result<EncoderTrace> {
        if x.len() != self.config.input_dim {
            return Err(KmclError::DimensionMismatch {
                what: "encoder input",
                expected: self.config.input_dim,
                found: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            let out = if self.activated(l) {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut h, out));
            pre.push(z);
        }
        Ok(EncoderTrace {
            inputs,
            pre,
            output: h,
        })
    }

    /// Accumulate parameter gradients into `grad` given `dL/df`; returns `dL/dx`.
    pub fn backward(&self, trace: &EncoderTrace, d_out: &[f64], grad: &mut Encoder) -> Vec<f64> {
        let mut delta = d_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if self.activated(l) {
                for (d, z) in delta.iter_mut().zip(&trace.pre[l]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &trace.inputs[l];
            let g = &mut grad.layers[l];
            let mut d_in = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = o * layer.inputs;
                for j in 0..layer.inputs {
                    g.weight[row + j] += d * input[j];
                    d_in[j] += d * layer.weight[row + j];
                }
            }
            delta = d_in;
        }
        delta
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, d)| {
                [
                    (format!("enc.{l}.weight"), d.weight.as_slice()),
                    (format!("enc.{l}.bias"), d.bias.as_slice()),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(l, d)| {
                [
                    (format!("enc.{l}.weight"), d.weight.as_mut_slice()),
                    (format!("enc.{l}.bias"), d.bias.as_mut_slice()),
                ]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_passes_through() {
        let cfg = EncoderConfig {
            input_dim: 3,
            hidden: vec![],
            feature_dim: 3,
            identity: true,
            output_relu: false,
        };
        let enc = Encoder::zeros(cfg);
        assert!(enc.layers.is_empty());
        assert_eq!(enc.encode(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn identity_requires_matching_widths() {
        let cfg = EncoderConfig {
            input_dim: 3,
            hidden: vec![],
            feature_dim: 4,
            identity: true,
            output_relu: false,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unit_layer_with_rectifier_is_identity_on_nonnegative_input() {
        let cfg = EncoderConfig {
            input_dim: 3,
            hidden: vec![],
            feature_dim: 3,
            identity: false,
            output_relu: true,
        };
        let mut enc = Encoder::zeros(cfg);
        for i in 0..3 {
            enc.layers[0].weight[i * 3 + i] = 1.0;
        }
        let x = [0.5, 0.0, 2.0];
        assert_eq!(enc.encode(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn two_layer_matches_naive_loops() {
        let cfg = EncoderConfig {
            input_dim: 4,
            hidden: vec![5],
            feature_dim: 3,
            identity: false,
            output_relu: false,
        };
        let enc = Encoder::init(cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let x = [0.2, -0.7, 1.1, 0.4];
        let mut h = vec![0.0; 5];
        for o in 0..5 {
            let mut acc = enc.layers[0].bias[o];
            for j in 0..4 {
                acc += enc.layers[0].weight[o * 4 + j] * x[j];
            }
            h[o] = if acc > 0.0 { acc } else { 0.0 };
        }
        let mut f = vec![0.0; 3];
        for o in 0..3 {
            let mut acc = enc.layers[1].bias[o];
            for j in 0..5 {
                acc += enc.layers[1].weight[o * 5 + j] * h[j];
            }
            f[o] = acc;
        }
        let got = enc.encode(&x).unwrap();
        for (a, b) in got.iter().zip(&f) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_length_checked() {
        let enc = Encoder::zeros(EncoderConfig::default());
        assert!(enc.encode(&[1.0; 5]).is_err());
        assert_eq!(enc.encode(&[1.0; 32]).unwrap().len(), 32);
    }
}
