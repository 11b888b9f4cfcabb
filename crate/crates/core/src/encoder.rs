//! Two-tower MLP encoders mapping feature vectors to unit-norm embeddings.
//!
//! Layers compute `x·W + b` with `W` stored `in × out`. Low-rank adapters
//! add `(s/r)·(x·B)·A` before the bias. The graph path and the no-grad
//! path call the same tensor kernels in the same order, so they agree
//! bitwise.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{FeatureSource, FeatureVector};
use crate::graph::{Graph, Var};
use crate::lora::{AdapterSet, Tower};
use crate::tensor::{l2_normalized, Activation, Scalar, Tensor};

const MAGIC: &[u8; 7] = b"EFSAENC";
const FORMAT_VERSION: u32 = 1;

/// A unit-norm embedding.
pub type Embedding = Vec<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_e: usize,
    /// Number of linear layers, at least 1.
    pub layers: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            d_in: 256,
            d_hidden: 256,
            d_e: 64,
            layers: 2,
        }
    }
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 || self.d_e == 0 || self.layers == 0 {
            return Err(Error::config(format!("invalid encoder dims {self:?}")));
        }
        Ok(())
    }

    /// `(in, out)` shape of each layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|i| {
                let rows = if i == 0 { self.d_in } else { self.d_hidden };
                let cols = if i + 1 == self.layers {
                    self.d_e
                } else {
                    self.d_hidden
                };
                (rows, cols)
            })
            .collect()
    }
}

/// Uniform Xavier initialization of a `rows × cols` matrix.
pub fn xavier_uniform<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("xavier shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Scalar = f32> {
    /// `in × out`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if !weight.is_matrix() || bias.len() != weight.cols() {
            return Err(Error::shape(format!(
                "linear layer weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn rows(&self) -> usize {
        self.weight.rows()
    }

    pub fn cols(&self) -> usize {
        self.weight.cols()
    }
}

/// Low-rank update attached to one layer during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LowRank<'a, T: Scalar> {
    /// `in × r`.
    pub b: &'a Tensor<T>,
    /// `r × out`.
    pub a: &'a Tensor<T>,
    pub scale: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T: Scalar = f32> {
    layers: Vec<Linear<T>>,
    activation: Activation,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn new(layers: Vec<Linear<T>>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("encoder needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].cols() != w[1].rows() {
                return Err(Error::shape(format!(
                    "layer output {} feeds input {}",
                    w[0].cols(),
                    w[1].rows()
                )));
            }
        }
        if layers
            .iter()
            .any(|l| !l.weight.is_finite() || !l.bias.is_finite())
        {
            return Err(Error::config("encoder weights must be finite"));
        }
        Ok(Self { layers, activation })
    }

    /// Xavier-uniform weights and zero biases, reproducible from `seed`.
    pub fn init(seed: u64, dims: &EncoderDims, activation: Activation) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .layer_shapes()
            .into_iter()
            .map(|(rows, cols)| Linear {
                weight: xavier_uniform(&mut rng, rows, cols),
                bias: Tensor::zeros(&[cols]),
            })
            .collect();
        Self::new(layers, activation)
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn d_e(&self) -> usize {
        self.layers[self.layers.len() - 1].cols()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            activation: self.activation,
        }
    }

    /// Forward pass over a batch `x` (`N × d_in`), returning unit-norm rows.
    /// `adapters[i]`, when present, is applied to layer `i`.
    pub fn forward(&self, x: &Tensor<T>, adapters: &[Option<LowRank<'_, T>>]) -> Result<Tensor<T>> {
        if x.cols() != self.d_in() {
            return Err(Error::shape(format!(
                "encoder input dimension {} != {}",
                x.cols(),
                self.d_in()
            )));
        }
        let mut h = if x.is_matrix() {
            x.clone()
        } else {
            Tensor::matrix(1, x.len(), x.data().to_vec())?
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weight)?;
            if let Some(Some(lr)) = adapters.get(i) {
                let delta = h.matmul(lr.b)?.matmul(lr.a)?.scale(lr.scale);
                z = z.add(&delta)?;
            }
            z = z.add_row(&layer.bias)?;
            h = if i < last {
                z.activate(self.activation)
            } else {
                z
            };
        }
        h.l2_normalize_rows()
    }

    /// Adds every layer's weight and bias as leaves of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: g.leaf(l.weight.clone(), trainable),
                bias: g.leaf(l.bias.clone(), trainable),
                low_rank: None,
            })
            .collect()
    }
}

/// Graph handles for one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    /// `(B, A, scale)` of an attached adapter; `scale` is stored as f64
    /// and converted at use.
    pub low_rank: Option<(Var, Var, f64)>,
}

/// Graph-recorded twin of [`EncoderParams::forward`].
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    layers: &[LayerVars],
    activation: Activation,
) -> Result<Var> {
    let mut h = x;
    let last = layers.len() - 1;
    for (i, lv) in layers.iter().enumerate() {
        let mut z = g.matmul(h, lv.weight)?;
        if let Some((b, a, scale)) = lv.low_rank {
            let xb = g.matmul(h, b)?;
            let xba = g.matmul(xb, a)?;
            let delta = g.scale(xba, T::from_f64(scale));
            z = g.add(z, delta)?;
        }
        z = g.add_row(z, lv.bias)?;
        h = if i < last {
            g.activate(z, activation)
        } else {
            z
        };
    }
    g.l2_normalize_rows(h)
}

/// The vision and text towers. No weights are shared.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder<T: Scalar = f32> {
    pub vision: EncoderParams<T>,
    pub text: EncoderParams<T>,
}

impl<T: Scalar> DualEncoder<T> {
    pub fn init(seed: u64, dims: &EncoderDims, activation: Activation) -> Result<Self> {
        Ok(Self {
            vision: EncoderParams::init(seed, dims, activation)?,
            text: EncoderParams::init(seed ^ 0x7465_7874_746f_7765, dims, activation)?,
        })
    }

    pub fn tower(&self, tower: Tower) -> &EncoderParams<T> {
        match tower {
            Tower::Vision => &self.vision,
            Tower::Text => &self.text,
        }
    }

    pub fn tower_mut(&mut self, tower: Tower) -> &mut EncoderParams<T> {
        match tower {
            Tower::Vision => &mut self.vision,
            Tower::Text => &mut self.text,
        }
    }

    pub fn cast<U: Scalar>(&self) -> DualEncoder<U> {
        DualEncoder {
            vision: self.vision.cast(),
            text: self.text.cast(),
        }
    }

    /// Batch-encodes with one tower, applying `adapters` when given.
    pub fn encode_batch(
        &self,
        tower: Tower,
        x: &Tensor<T>,
        adapters: Option<&AdapterSet<T>>,
    ) -> Result<Tensor<T>> {
        let params = self.tower(tower);
        let low_rank = match adapters {
            Some(set) => set.low_rank_for(tower, params.layers().len()),
            None => Vec::new(),
        };
        params.forward(x, &low_rank)
    }
}

impl DualEncoder<f32> {
    /// Encodes one feature vector. Imported vectors bypass the encoder body.
    pub fn encode(
        &self,
        tower: Tower,
        x: &FeatureVector,
        adapters: Option<&AdapterSet<f32>>,
    ) -> Result<Embedding> {
        if x.source == FeatureSource::Imported {
            let d_e = self.tower(tower).d_e();
            if x.dim() != d_e {
                return Err(Error::shape(format!(
                    "imported vector of dimension {} for d_e {d_e}",
                    x.dim()
                )));
            }
            return l2_normalized(&x.values);
        }
        let t = Tensor::matrix(1, x.dim(), x.values.clone())?;
        Ok(self.encode_batch(tower, &t, adapters)?.into_data())
    }
}

/// Free-function form of [`DualEncoder::encode`].
pub fn encode(
    params: &DualEncoder,
    tower: Tower,
    x: &FeatureVector,
    adapters: Option<&AdapterSet<f32>>,
) -> Result<Embedding> {
    params.encode(tower, x, adapters)
}

pub fn write_encoder(params: &EncoderParams<f32>, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(params.layers.len() as u32).to_le_bytes())?;
    for l in &params.layers {
        w.write_all(&(l.rows() as u32).to_le_bytes())?;
        w.write_all(&(l.cols() as u32).to_le_bytes())?;
        for v in l.weight.data().iter().chain(l.bias.data()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_encoder(r: &mut impl Read, activation: Activation) -> Result<EncoderParams<f32>> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an encoder parameter file".into()));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported encoder version {version}"
        )));
    }
    let n_layers = read_u32(r)? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let weight = Tensor::matrix(rows, cols, read_f32s(r, rows * cols)?)?;
        let bias = Tensor::vector(read_f32s(r, cols)?);
        layers.push(Linear::new(weight, bias)?);
    }
    EncoderParams::new(layers, activation)
}

pub fn save_encoder(params: &EncoderParams<f32>, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_encoder(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_encoder(path: &Path, activation: Activation) -> Result<EncoderParams<f32>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_encoder(&mut r, activation)
}
