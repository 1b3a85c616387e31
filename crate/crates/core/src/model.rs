//! Toy per-point encoder and segmentation head with hand-written backprop.
//!
//! The encoder is a small MLP mapping `3 + aux` input channels to a `d`-dim
//! embedding; its last layer is linear and feeds an L2 row normalization so
//! embeddings live on the unit sphere. The head is one affine map from the
//! embedding to class logits.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, axpy, Matrix};

pub const MODEL_MAGIC: &[u8; 4] = b"TMDL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative written in terms of the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Affine layer `y = x·W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
        }
    }

    /// He-style scaled normal weights, zero bias.
    fn random(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (2.0 / input as f64).sqrt();
        let w = (0..input * output)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
            .collect::<Vec<f64>>();
        Dense {
            weight: Matrix::from_vec(input, output, w).expect("sized"),
            bias: vec![0.0; output],
        }
    }

    pub fn input(&self) -> usize {
        self.weight.rows()
    }

    pub fn output(&self) -> usize {
        self.weight.cols()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight).expect("layer shapes checked at construction");
        for r in 0..y.rows() {
            axpy(1.0, &self.bias, y.row_mut(r));
        }
        y
    }

    fn param_count(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegHead {
    pub layer: Dense,
}

/// Encoder plus head; the unit that is trained and checkpointed.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: MlpEncoder,
    pub head: SegHead,
}

/// Shape of a model: `input -> hidden... -> embed_dim -> classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub classes: usize,
    pub activation: Activation,
}

impl ModelShape {
    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.classes == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid(format!("model widths must be positive: {self:?}")));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.embed_dim);
        w
    }
}

impl Model {
    pub fn random(shape: &ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = shape.widths();
        let layers = widths
            .windows(2)
            .map(|w| Dense::random(w[0], w[1], &mut rng))
            .collect();
        let mut head = Dense::random(shape.embed_dim, shape.classes, &mut rng);
        head.weight
            .as_mut_slice()
            .iter_mut()
            .for_each(|w| *w *= 0.5);
        Ok(Model {
            encoder: MlpEncoder {
                layers,
                activation: shape.activation,
            },
            head: SegHead { layer: head },
        })
    }

    pub fn zeros(shape: &ModelShape) -> Result<Self> {
        shape.validate()?;
        let widths = shape.widths();
        Ok(Model {
            encoder: MlpEncoder {
                layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
                activation: shape.activation,
            },
            head: SegHead {
                layer: Dense::zeros(shape.embed_dim, shape.classes),
            },
        })
    }

    pub fn shape(&self) -> ModelShape {
        let layers = &self.encoder.layers;
        ModelShape {
            input_dim: layers[0].input(),
            hidden: layers[..layers.len() - 1].iter().map(|l| l.output()).collect(),
            embed_dim: self.embed_dim(),
            classes: self.head.layer.output(),
            activation: self.encoder.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.layers[0].input()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.layers.last().expect("encoder has layers").output()
    }

    pub fn classes(&self) -> usize {
        self.head.layer.output()
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    /// Encoder layers then the head.
    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.layers.iter().chain(std::iter::once(&self.head.layer))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder
            .layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head.layer))
    }

    /// All parameters flattened: per layer, weights row-major then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
            let b = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + b]);
            off += b;
        }
        Ok(())
    }

    pub fn forward(&self, points: &Matrix) -> Result<Forward> {
        if points.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} channels, model expects {}",
                points.cols(),
                self.input_dim()
            )));
        }
        let act = self.encoder.activation;
        let last = self.encoder.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.encoder.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut x = points.clone();
        for (i, layer) in self.encoder.layers.iter().enumerate() {
            let z = layer.forward(&x);
            inputs.push(x);
            if i == last {
                x = z;
            } else {
                let mut h = z.clone();
                h.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
                pre.push(z);
                x = h;
            }
        }
        let raw = x;
        let normalized = numerics::l2_normalize_rows(&raw);
        let norms: Vec<f64> = raw.iter_rows().map(numerics::norm).collect();
        let logits = self.head.layer.forward(&normalized.matrix);
        Ok(Forward {
            embeddings: normalized.matrix,
            logits,
            zero_rows: normalized.zero_rows,
            cache: ForwardCache {
                shapes: self.layer_shapes(),
                inputs,
                pre_activations: pre,
                norms,
            },
        })
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers().map(|l| (l.input(), l.output())).collect()
    }

    /// Parameter gradients given upstream gradients on the unit-norm
    /// embeddings and on the logits. Both paths meet at the embeddings.
    pub fn backward(&self, fwd: &Forward, grad_embeddings: &Matrix, grad_logits: &Matrix) -> Result<Gradients> {
        let cache = &fwd.cache;
        if cache.shapes != self.layer_shapes() {
            return Err(Error::invalid("forward cache does not belong to this model"));
        }
        let n = fwd.embeddings.rows();
        if (grad_embeddings.rows(), grad_embeddings.cols()) != (n, self.embed_dim())
            || (grad_logits.rows(), grad_logits.cols()) != (n, self.classes())
        {
            return Err(Error::invalid("upstream gradient shapes do not match the forward batch"));
        }
        let act = self.encoder.activation;
        let mut grads = Vec::with_capacity(self.encoder.layers.len() + 1);

        // Head: y = e·W + b.
        let head_grad = Dense {
            weight: fwd.embeddings.t_matmul(grad_logits)?,
            bias: column_sums(grad_logits),
        };
        let mut g = grad_logits.matmul_t(&self.head.layer.weight)?;
        axpy(1.0, grad_embeddings.as_slice(), g.as_mut_slice());

        // Normalization: e = r/‖r‖, de/dr = (I − e eᵀ)/‖r‖. Zero rows pass no gradient.
        for i in 0..n {
            let e = fwd.embeddings.row(i);
            let nrm = cache.norms[i];
            let row = g.row_mut(i);
            if nrm == 0.0 {
                row.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let proj = numerics::dot(e, row);
            for (gv, &ev) in row.iter_mut().zip(e) {
                *gv = (*gv - proj * ev) / nrm;
            }
        }

        let last = self.encoder.layers.len() - 1;
        let mut enc_grads: Vec<Dense> = Vec::with_capacity(last + 1);
        for i in (0..=last).rev() {
            if i < last {
                // g is dL/dh for hidden layer i; move through the activation.
                let z = &cache.pre_activations[i];
                for (gv, &zv) in g.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    *gv *= act.derivative(zv, act.apply(zv));
                }
            }
            let x = &cache.inputs[i];
            enc_grads.push(Dense {
                weight: x.t_matmul(&g)?,
                bias: column_sums(&g),
            });
            if i > 0 {
                g = g.matmul_t(&self.encoder.layers[i].weight)?;
            }
        }
        enc_grads.reverse();
        grads.extend(enc_grads);
        grads.push(head_grad);
        Ok(Gradients { layers: grads })
    }

    /// `p ← p − lr·g` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) -> Result<()> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be nonnegative, got {learning_rate}")));
        }
        if grads.layers.len() != self.encoder.layers.len() + 1 {
            return Err(Error::invalid("gradient layer count does not match model"));
        }
        for (l, g) in self.layers_mut().zip(&grads.layers) {
            if l.weight.as_slice().len() != g.weight.as_slice().len() || l.bias.len() != g.bias.len() {
                return Err(Error::invalid("gradient shape does not match model"));
            }
            axpy(-learning_rate, g.weight.as_slice(), l.weight.as_mut_slice());
            axpy(-learning_rate, &g.bias, &mut l.bias);
        }
        Ok(())
    }

    /// Binary checkpoint: `TMDL`, version, activation code, layer count
    /// (`u32` LE; the last layer is the head), `(in, out)` per layer, then
    /// each layer's weights row-major and bias as `f64` LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        let shapes = self.layer_shapes();
        for v in [MODEL_VERSION, self.encoder.activation.code(), shapes.len() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for (i, o) in &shapes {
            buf.extend_from_slice(&(*i as u32).to_le_bytes());
            buf.extend_from_slice(&(*o as u32).to_le_bytes());
        }
        for v in self.flat_params() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |message: &str| Error::Format {
            path: origin.to_string(),
            message: message.to_string(),
        };
        let u32_at = |o: usize| -> Result<u32> {
            bytes
                .get(o..o + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated checkpoint"))
        };
        if bytes.len() < 16 || &bytes[..4] != MODEL_MAGIC {
            return Err(bad("not a model checkpoint (bad magic)"));
        }
        if u32_at(4)? != MODEL_VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        let activation = Activation::from_code(u32_at(8)?).ok_or_else(|| bad("unknown activation"))?;
        let count = u32_at(12)? as usize;
        if count < 2 {
            return Err(bad("checkpoint needs at least one encoder layer and a head"));
        }
        let mut shapes = Vec::with_capacity(count);
        for l in 0..count {
            shapes.push((u32_at(16 + 8 * l)? as usize, u32_at(20 + 8 * l)? as usize));
        }
        for w in shapes.windows(2) {
            if w[0].1 != w[1].0 {
                return Err(bad("layer shapes do not chain"));
            }
        }
        let mut off = 16 + 8 * count;
        let mut read = |len: usize| -> Result<Vec<f64>> {
            let raw = bytes
                .get(off..off + len * 8)
                .ok_or_else(|| bad("truncated parameters"))?;
            off += len * 8;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut layers = Vec::with_capacity(count);
        for &(i, o) in &shapes {
            let w = read(i * o)?;
            let b = read(o)?;
            layers.push(Dense {
                weight: Matrix::from_vec(i, o, w)?,
                bias: b,
            });
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after parameters"));
        }
        let head = layers.pop().expect("count >= 2");
        Ok(Model {
            encoder: MlpEncoder { layers, activation },
            head: SegHead { layer: head },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes, &path.display().to_string())
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        axpy(1.0, row, &mut out);
    }
    out
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    shapes: Vec<(usize, usize)>,
    /// Input to every encoder layer.
    inputs: Vec<Matrix>,
    /// Pre-activation of every hidden layer.
    pre_activations: Vec<Matrix>,
    /// Norm of each raw embedding row before normalization.
    norms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub embeddings: Matrix,
    pub logits: Matrix,
    /// Raw embedding rows that were exactly zero.
    pub zero_rows: usize,
    pub cache: ForwardCache,
}

/// Gradients laid out like the model: encoder layers then the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|&v| v == 0.0)
    }
}
