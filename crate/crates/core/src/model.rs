//! The trainable system: a dense backbone producing embeddings, the class
//! center matrix, and the affine quality-regression head.
//!
//! # Checkpoint layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic            4 bytes  "CRFQ"
//! version          u32      1
//! input_dim        u32
//! hidden_count     u32
//! hidden_dims      u32 × hidden_count
//! embedding_dim    u32
//! activation       u8       0 = relu, 1 = tanh
//! head_input       u8       0 = raw embedding, 1 = normalized embedding
//! num_classes      u32
//! parameters       f64 × …  in declaration order:
//!                           per layer: weight (out × in, row-major), bias (out)
//!                           centers (C × d, row-major)
//!                           head weight (d), head bias (1)
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiability::ClassCenterMatrix;
use crate::error::{Error, Result};
use crate::geometry::{self, dot};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRFQ";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Which embedding the quality head reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInput {
    #[default]
    Raw,
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    #[serde(default)]
    pub head_input: HeadInput,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.input_dim == 0 || b.embedding_dim < 2 || b.hidden_dims.contains(&0) {
            return Err(Error::Config(format!("invalid backbone {b:?}")));
        }
        if self.num_classes < 2 {
            return Err(Error::InsufficientClasses(self.num_classes));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let b = &self.backbone;
        let mut dims = vec![b.input_dim];
        dims.extend(&b.hidden_dims);
        dims.push(b.embedding_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Fully connected layer `y = W a + b` with `W` stored `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, a: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weight
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| dot(row, a) + b),
        );
    }
}

/// Parameters of the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    pub layers: Vec<Dense>,
    pub centers: ClassCenterMatrix,
    pub head_weight: Vec<f64>,
    pub head_bias: f64,
}

/// Result of a forward pass on one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Backbone output before normalization.
    pub embedding: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Cosine to every class center.
    pub cosines: Vec<f64>,
    /// Regression head output `P`.
    pub quality: f64,
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer (`layer_inputs[0]` is the sample itself).
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre_activations: Vec<Vec<f64>>,
    embedding_norm: f64,
    pub output: ForwardOutput,
}

/// Gradient buffers laid out like [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
    pub centers: Vec<f64>,
    pub head_weight: Vec<f64>,
    pub head_bias: f64,
}

impl Gradients {
    pub fn zeros_like(state: &ModelState) -> Self {
        Self {
            layers: state
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
            centers: vec![0.0; state.centers.as_slice().len()],
            head_weight: vec![0.0; state.head_weight.len()],
            head_bias: 0.0,
        }
    }

    /// Parameter slices in checkpoint order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(self.layers.len() * 2 + 3);
        for l in &self.layers {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v.push(&self.centers);
        v.push(&self.head_weight);
        v.push(std::slice::from_ref(&self.head_bias));
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(self.layers.len() * 2 + 3);
        for l in &mut self.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v.push(&mut self.centers);
        v.push(&mut self.head_weight);
        v.push(std::slice::from_mut(&mut self.head_bias));
        v
    }

    /// Adds `weight_decay · θ` for every parameter.
    pub fn add_weight_decay(&mut self, state: &ModelState, weight_decay: f64) {
        if weight_decay == 0.0 {
            return;
        }
        for (g, p) in self.slices_mut().into_iter().zip(state.slices()) {
            g.iter_mut().zip(p).for_each(|(g, p)| *g += weight_decay * p);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

impl ModelState {
    /// Seeded initialization: backbone weights uniform in `±1/√fan_in`,
    /// biases zero, centers uniform in `±1/√d` then normalized, head zero.
    ///
    /// Random biases would give every embedding a shared offset as large as
    /// the input-dependent part, starting all samples in nearly one direction.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| {
                let bound = 1.0 / (i as f64).sqrt();
                let mut l = Dense::zeros(i, o);
                l.weight
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-bound..bound));
                l
            })
            .collect();
        let d = config.backbone.embedding_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let raw = (0..d * config.num_classes)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let centers = ClassCenterMatrix::from_unnormalized(d, raw)?;
        Ok(Self {
            layers,
            centers,
            head_weight: vec![0.0; d],
            head_bias: 0.0,
            config,
        })
    }

    /// Assembles a state from explicit parameters, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        layers: Vec<Dense>,
        centers: ClassCenterMatrix,
        head_weight: Vec<f64>,
        head_bias: f64,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        let layers_ok = shapes.len() == layers.len()
            && shapes.iter().zip(&layers).all(|(&(i, o), l)| {
                l.inputs == i && l.outputs == o && l.weight.len() == i * o && l.bias.len() == o
            });
        let d = config.backbone.embedding_dim;
        if !layers_ok
            || centers.dim() != d
            || centers.num_classes() != config.num_classes
            || head_weight.len() != d
        {
            return Err(Error::Config(
                "parameter shapes do not match the model config".into(),
            ));
        }
        Ok(Self {
            config,
            layers,
            centers,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.backbone.input_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.backbone.embedding_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(self.layers.len() * 2 + 3);
        for l in &self.layers {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v.push(self.centers.as_slice());
        v.push(&self.head_weight);
        v.push(std::slice::from_ref(&self.head_bias));
        v
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(self.layers.len() * 2 + 3);
        for l in &mut self.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v.push(self.centers.as_mut_slice());
        v.push(&mut self.head_weight);
        v.push(std::slice::from_mut(&mut self.head_bias));
        v
    }

    /// Number of backbone + center parameter slices (everything except the head).
    pub(crate) fn body_slice_count(&self) -> usize {
        self.layers.len() * 2 + 1
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    /// Overwrites every parameter from a flat vector in checkpoint order.
    /// Centers are taken verbatim (not renormalized).
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.slices().iter().map(|s| s.len()).sum();
        if flat.len() != total {
            return Err(Error::Dimension {
                expected: total,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.slices().iter().map(|s| dot(s, s)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Forward pass keeping the intermediates needed by [`backward`](Self::backward).
    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let act = self.config.backbone.activation;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut a = input.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.forward(&a, &mut z);
            layer_inputs.push(a);
            if k == last {
                a = z;
            } else {
                a = z.iter().map(|&v| act.apply(v)).collect();
                pre_activations.push(z);
            }
        }
        let embedding = a;
        let mut normalized = embedding.clone();
        let embedding_norm = geometry::l2_normalize_in_place(&mut normalized)?;
        let cosines = self
            .centers
            .centers()
            .map(|w| geometry::clamp_cosine(dot(&normalized, w) / geometry::norm(w)))
            .collect();
        let head_in = match self.config.head_input {
            HeadInput::Raw => &embedding,
            HeadInput::Normalized => &normalized,
        };
        let quality = dot(&self.head_weight, head_in) + self.head_bias;
        Ok(Trace {
            layer_inputs,
            pre_activations,
            embedding_norm,
            output: ForwardOutput {
                embedding,
                normalized,
                cosines,
                quality,
            },
        })
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardOutput> {
        self.forward_trace(input).map(|t| t.output)
    }

    /// Quality scores for a batch of inputs. Needs no labels.
    pub fn predict_quality<I: AsRef<[f64]>>(&self, inputs: &[I]) -> Result<Vec<f64>> {
        if inputs.is_empty() {
            return Err(Error::Config("no inputs to score".into()));
        }
        inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                self.forward(x.as_ref())
                    .map(|o| o.quality)
                    .map_err(|e| e.at_sample(i))
            })
            .collect()
    }

    /// Unit-norm embeddings for a batch of inputs.
    pub fn embed<I: AsRef<[f64]>>(&self, inputs: &[I]) -> Result<Vec<Vec<f64>>> {
        inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                self.forward(x.as_ref())
                    .map(|o| o.normalized)
                    .map_err(|e| e.at_sample(i))
            })
            .collect()
    }

    /// Accumulates the gradient of one sample into `grads`, given the
    /// upstream gradients with respect to its cosine row and its quality
    /// output.
    ///
    /// Center gradients are accumulated with respect to the normalized center
    /// direction; call [`finish_center_gradients`](Self::finish_center_gradients)
    /// once per batch to project them onto the raw center parameters.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_cosines: &[f64],
        grad_quality: f64,
        grads: &mut Gradients,
        update_body: bool,
    ) {
        let out = &trace.output;
        let d = self.embedding_dim();
        let head_in = match self.config.head_input {
            HeadInput::Raw => &out.embedding,
            HeadInput::Normalized => &out.normalized,
        };
        grads
            .head_weight
            .iter_mut()
            .zip(head_in)
            .for_each(|(g, v)| *g += grad_quality * v);
        grads.head_bias += grad_quality;
        if !update_body {
            return;
        }

        // dL/dx̂ from the cosines, plus the head term for the normalized input
        let mut g_hat = vec![0.0; d];
        for (j, (&gc, w)) in grad_cosines.iter().zip(self.centers.centers()).enumerate() {
            if gc == 0.0 {
                continue;
            }
            let inv = 1.0 / geometry::norm(w);
            for k in 0..d {
                g_hat[k] += gc * w[k] * inv;
            }
            let gw = &mut grads.centers[j * d..(j + 1) * d];
            gw.iter_mut().zip(&out.normalized).for_each(|(g, x)| *g += gc * x);
        }
        if self.config.head_input == HeadInput::Normalized {
            g_hat
                .iter_mut()
                .zip(&self.head_weight)
                .for_each(|(g, h)| *g += grad_quality * h);
        }
        let radial = dot(&g_hat, &out.normalized);
        let mut g: Vec<f64> = g_hat
            .iter()
            .zip(&out.normalized)
            .map(|(gh, x)| (gh - x * radial) / trace.embedding_norm)
            .collect();
        if self.config.head_input == HeadInput::Raw {
            g.iter_mut()
                .zip(&self.head_weight)
                .for_each(|(g, h)| *g += grad_quality * h);
        }

        let act = self.config.backbone.activation;
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let a = &trace.layer_inputs[k];
            let gl = &mut grads.layers[k];
            for (o, &go) in g.iter().enumerate() {
                gl.bias[o] += go;
                let row = &mut gl.weight[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(a).for_each(|(w, ai)| *w += go * ai);
            }
            if k == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &go) in g.iter().enumerate() {
                let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += go * w);
            }
            let z = &trace.pre_activations[k - 1];
            prev.iter_mut()
                .zip(z)
                .for_each(|(p, &zi)| *p *= act.derivative(zi));
            g = prev;
        }
    }

    /// Converts accumulated `Σ gc·x̂` center terms into gradients with respect
    /// to the raw (pre-normalization) center parameters.
    pub fn finish_center_gradients(&self, grads: &mut Gradients) {
        let d = self.embedding_dim();
        for (w, g) in self.centers.centers().zip(grads.centers.chunks_exact_mut(d)) {
            let n = geometry::norm(w);
            let radial = dot(w, g) / n;
            g.iter_mut()
                .zip(w)
                .for_each(|(gi, wi)| *gi = (*gi - wi / n * radial) / n);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let push_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        push_u32(&mut out, c.backbone.input_dim);
        push_u32(&mut out, c.backbone.hidden_dims.len());
        for &h in &c.backbone.hidden_dims {
            push_u32(&mut out, h);
        }
        push_u32(&mut out, c.backbone.embedding_dim);
        out.push(match c.backbone.activation {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        });
        out.push(match c.head_input {
            HeadInput::Raw => 0,
            HeadInput::Normalized => 1,
        });
        push_u32(&mut out, c.num_classes);
        for s in self.slices() {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let input_dim = r.u32()? as usize;
        let hidden_count = r.u32()? as usize;
        if hidden_count > 1024 {
            return Err(Error::Checkpoint(format!(
                "implausible layer count {hidden_count}"
            )));
        }
        let hidden_dims = (0..hidden_count)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let embedding_dim = r.u32()? as usize;
        let activation = match r.take(1)?[0] {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            v => return Err(Error::Checkpoint(format!("unknown activation tag {v}"))),
        };
        let head_input = match r.take(1)?[0] {
            0 => HeadInput::Raw,
            1 => HeadInput::Normalized,
            v => return Err(Error::Checkpoint(format!("unknown head input tag {v}"))),
        };
        let num_classes = r.u32()? as usize;
        let config = ModelConfig {
            backbone: BackboneConfig {
                input_dim,
                hidden_dims,
                embedding_dim,
                activation,
            },
            num_classes,
            head_input,
        };
        config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;

        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| {
                Ok(Dense {
                    inputs: i,
                    outputs: o,
                    weight: r.f64s(i * o)?,
                    bias: r.f64s(o)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let centers = r.f64s(embedding_dim * num_classes)?;
        let head_weight = r.f64s(embedding_dim)?;
        let head_bias = r.f64s(1)?[0];
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        // Stored centers are unit norm up to the last optimizer step's rounding;
        // they are kept bit-exact rather than renormalized.
        let centers =
            ClassCenterMatrix::new(embedding_dim, centers).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_parts(config, layers, centers, head_weight, head_bias)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
