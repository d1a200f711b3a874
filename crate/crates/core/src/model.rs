//! Encoder and kernel mixture head composed into one trainable model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderConfig, EncoderTrace};
use crate::error::{KmclError, Result};
use crate::grad::{ParamSlot, ParamStore};
use crate::kmm::{
    kmm_activate, kmm_forward, KernelMode, KernelParams, KmmActivations, KmmConfig, KmmWeights,
    SharedVariance,
};
use crate::losses::{BatchView, LabelVector};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub classes: usize,
    pub mode: KernelMode,
    pub shared: SharedVariance,
}

impl ModelConfig {
    pub fn kmm(&self) -> KmmConfig {
        KmmConfig {
            classes: self.classes,
            dim: self.encoder.feature_dim,
            mode: self.mode,
            shared: self.shared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.classes == 0 {
            return Err(KmclError::invalid("classes", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub kmm: KmmWeights,
}

/// Everything the backward pass needs from one sample's forward pass.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub trace: EncoderTrace,
    pub activations: KmmActivations,
    pub params: KernelParams,
}

impl SampleForward {
    pub fn features(&self) -> &[f64] {
        &self.trace.output
    }
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(config.encoder.clone(), &mut rng);
        let kmm = KmmWeights::init(config.kmm(), &mut rng);
        Ok(Model { encoder, kmm })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.config.clone(),
            classes: self.kmm.config.classes,
            mode: self.kmm.config.mode,
            shared: self.kmm.config.shared,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Model {
            encoder: Encoder::zeros(self.encoder.config.clone()),
            kmm: KmmWeights::zeros(self.kmm.config),
        }
    }

    pub fn classes(&self) -> usize {
        self.kmm.config.classes
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.config.input_dim
    }

    pub fn forward(&self, x: &[f64]) -> Result<SampleForward> {
        let trace = self.encoder.trace(x)?;
        let activations = kmm_forward(&trace.output, &self.kmm)?;
        let params = kmm_activate(&activations, self.kmm.config.mode, self.kmm.config.dim);
        Ok(SampleForward {
            trace,
            activations,
            params,
        })
    }

    /// Class probabilities `π` for one input.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.params.pi)
    }

    pub fn forward_batch(
        &self,
        inputs: &[Vec<f64>],
        labels: &[LabelVector],
    ) -> Result<(Vec<SampleForward>, BatchView)> {
        let samples = inputs
            .iter()
            .map(|x| self.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let batch = BatchView::new(
            samples.iter().map(|s| s.params.clone()).collect(),
            labels.to_vec(),
            samples.iter().map(|s| s.trace.output.clone()).collect(),
            self.kmm.shared_variance(),
        )?;
        Ok((samples, batch))
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for layer in &self.encoder.layers {
            shapes.push(vec![layer.outputs, layer.inputs]);
            shapes.push(vec![layer.outputs]);
        }
        let c = self.kmm.config;
        let head = match c.mode {
            KernelMode::Isotropic => vec![c.classes],
            KernelMode::Anisotropic => vec![c.classes, c.dim],
        };
        let mut head_w = head.clone();
        head_w.push(c.dim);
        shapes.push(vec![c.classes, c.dim]);
        shapes.push(head_w.clone());
        shapes.push(head_w);
        shapes.push(vec![c.classes]);
        shapes.push(head.clone());
        shapes.push(head);
        shapes.push(vec![c.shared.len(c.dim)]);
        shapes
    }

    /// Named tensors in checkpoint order: encoder layers, then the head.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let names = self
            .encoder
            .tensors()
            .into_iter()
            .chain(self.kmm.tensors().into_iter().map(|(n, t)| (n.to_string(), t)));
        names
            .zip(self.shapes())
            .map(|((name, t), shape)| (name, shape, t))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = self.encoder.tensors_mut();
        out.extend(
            self.kmm
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t)),
        );
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn to_store(&self) -> ParamStore {
        let mut layout = Vec::new();
        let mut values = Vec::with_capacity(self.num_params());
        for (name, shape, t) in self.tensors() {
            layout.push(ParamSlot {
                name,
                offset: values.len(),
                shape,
            });
            values.extend_from_slice(t);
        }
        ParamStore::new(values, layout).expect("model layout is contiguous")
    }

    /// Flat copy of every parameter in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, _, t)| t.iter().copied())
            .collect()
    }

    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(KmclError::DimensionMismatch {
                what: "parameter count",
                expected: self.num_params(),
                found: values.len(),
            });
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn load_store(&mut self, store: &ParamStore) -> Result<()> {
        self.load_flat(store.values())
    }
}
