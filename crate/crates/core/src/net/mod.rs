//! Token-set projection network.
//!
//! Input embedding, two pre-norm self-attention blocks, a final layer norm and
//! mean pooling map a variable-length token set to one fixed-width vector. A
//! linear head on that vector supplies class logits.
//!
//! Parameters are held in `f64`; checkpoints store them as `f32`.

mod model;
mod optim;

pub use model::{backward, forward, ForwardOutput, Trace};
pub use optim::{cosine_lr, AdamConfig, AdamState};

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub input_dim: usize,
    pub width: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl NetConfig {
    pub fn new(input_dim: usize, n_classes: usize) -> NetConfig {
        NetConfig { input_dim, width: 512, n_blocks: 2, n_heads: 4, mlp_ratio: 2, n_classes, seed: 0 }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.n_heads
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let dims = [self.input_dim, self.width, self.n_blocks, self.n_heads, self.mlp_ratio, self.n_classes];
        if dims.contains(&0) {
            return Err(NetError::Config(format!("all dimensions must be positive: {self:?}")));
        }
        if self.width % self.n_heads != 0 {
            return Err(NetError::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    /// `(hidden, width)`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `(width, hidden)`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All trainable weights. Also used, zero-initialised, as the gradient buffer
/// and as Adam moment storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub config: NetConfig,
    /// `(width, input_dim)`
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf_gain: Array1<f64>,
    pub lnf_bias: Array1<f64>,
    /// `(n_classes, width)`
    pub w_head: Array2<f64>,
    pub b_head: Array1<f64>,
}

pub type ParamGrads = ProjectionParams;

macro_rules! block_tensors {
    ($b:expr, $suffix:ident) => {
        [
            $b.ln1_gain.$suffix(),
            $b.ln1_bias.$suffix(),
            $b.wq.$suffix(),
            $b.bq.$suffix(),
            $b.wk.$suffix(),
            $b.bk.$suffix(),
            $b.wv.$suffix(),
            $b.bv.$suffix(),
            $b.wo.$suffix(),
            $b.bo.$suffix(),
            $b.ln2_gain.$suffix(),
            $b.ln2_bias.$suffix(),
            $b.w1.$suffix(),
            $b.b1.$suffix(),
            $b.w2.$suffix(),
            $b.b2.$suffix(),
        ]
    };
}

const BLOCK_TENSOR_NAMES: [&str; 16] = [
    "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gain", "ln2_bias",
    "w1", "b1", "w2", "b2",
];

impl ProjectionParams {
    /// Every tensor filled with `value`, shapes taken from `config`.
    pub fn filled(config: NetConfig, value: f64) -> ProjectionParams {
        let (d, e, m, k) = (config.input_dim, config.width, config.hidden(), config.n_classes);
        let mat = |r, c| Array2::from_elem((r, c), value);
        let vec = |n| Array1::from_elem(n, value);
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams {
                ln1_gain: vec(e),
                ln1_bias: vec(e),
                wq: mat(e, e),
                bq: vec(e),
                wk: mat(e, e),
                bk: vec(e),
                wv: mat(e, e),
                bv: vec(e),
                wo: mat(e, e),
                bo: vec(e),
                ln2_gain: vec(e),
                ln2_bias: vec(e),
                w1: mat(m, e),
                b1: vec(m),
                w2: mat(e, m),
                b2: vec(e),
            })
            .collect();
        ProjectionParams {
            config,
            w_in: mat(e, d),
            b_in: vec(e),
            blocks,
            lnf_gain: vec(e),
            lnf_bias: vec(e),
            w_head: mat(k, e),
            b_head: vec(k),
        }
    }

    pub fn zeros(config: NetConfig) -> ProjectionParams {
        Self::filled(config, 0.0)
    }

    /// Weight matrices ~ N(0, 0.02²), biases zero, layer-norm gains one.
    pub fn init(config: NetConfig) -> Result<ProjectionParams, NetError> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut fill = |a: &mut Array2<f64>| a.mapv_inplace(|_| normal.sample(&mut rng));
        fill(&mut p.w_in);
        for b in &mut p.blocks {
            b.ln1_gain.fill(1.0);
            b.ln2_gain.fill(1.0);
            for w in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2] {
                fill(w);
            }
        }
        p.lnf_gain.fill(1.0);
        fill(&mut p.w_head);
        Ok(p)
    }

    /// Tensor names in checkpoint order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["w_in".to_string(), "b_in".to_string()];
        for i in 0..self.blocks.len() {
            names.extend(BLOCK_TENSOR_NAMES.iter().map(|n| format!("block{i}.{n}")));
        }
        names.extend(["lnf_gain", "lnf_bias", "w_head", "b_head"].map(String::from));
        names
    }

    /// Flat views of every tensor in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.w_in.as_slice().unwrap(), self.b_in.as_slice().unwrap()];
        for b in &self.blocks {
            out.extend(block_tensors!(b, as_slice).map(Option::unwrap));
        }
        out.push(self.lnf_gain.as_slice().unwrap());
        out.push(self.lnf_bias.as_slice().unwrap());
        out.push(self.w_head.as_slice().unwrap());
        out.push(self.b_head.as_slice().unwrap());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.w_in.as_slice_mut().unwrap(), self.b_in.as_slice_mut().unwrap()];
        for b in &mut self.blocks {
            out.extend(block_tensors!(b, as_slice_mut).map(Option::unwrap));
        }
        out.push(self.lnf_gain.as_slice_mut().unwrap());
        out.push(self.lnf_bias.as_slice_mut().unwrap());
        out.push(self.w_head.as_slice_mut().unwrap());
        out.push(self.b_head.as_slice_mut().unwrap());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ProjectionParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

pub const PARAMS_MAGIC: &[u8; 4] = b"TGPN";
pub const PARAMS_VERSION: u32 = 1;

/// `"TGPN" | version u32 | input_dim, width, n_blocks, n_heads, mlp_ratio,
/// n_classes as u32 | seed u64 | tensors f32 in `tensor_names` order`.
pub fn encode_params(params: &ProjectionParams) -> Vec<u8> {
    let c = &params.config;
    let mut buf = Vec::with_capacity(40 + 4 * params.num_parameters());
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    for v in [c.input_dim, c.width, c.n_blocks, c.n_heads, c.mlp_ratio, c.n_classes] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.seed.to_le_bytes());
    for t in params.tensors() {
        for &v in t {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_params(bytes: &[u8]) -> Result<ProjectionParams, NetError> {
    let bad = |m: &str| NetError::Checkpoint(m.to_string());
    if bytes.len() < 40 {
        return Err(bad("truncated header"));
    }
    if &bytes[..4] != PARAMS_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(1) != PARAMS_VERSION {
        return Err(NetError::Checkpoint(format!("unsupported version {}", word(1))));
    }
    let config = NetConfig {
        input_dim: word(2) as usize,
        width: word(3) as usize,
        n_blocks: word(4) as usize,
        n_heads: word(5) as usize,
        mlp_ratio: word(6) as usize,
        n_classes: word(7) as usize,
        seed: u64::from_le_bytes(bytes[32..40].try_into().unwrap()),
    };
    config.validate()?;
    let mut params = ProjectionParams::zeros(config);
    let expected = 40 + 4 * params.num_parameters();
    if bytes.len() != expected {
        return Err(NetError::Checkpoint(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut values = bytes[40..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = values.next().unwrap();
        }
    }
    if !params.is_finite() {
        return Err(NetError::NonFinite("checkpoint parameters"));
    }
    Ok(params)
}

pub fn save_params(params: &ProjectionParams, path: &Path) -> Result<(), NetError> {
    fs::write(path, encode_params(params)).map_err(|e| StoreError::io(path, e).into())
}

pub fn load_params(path: &Path) -> Result<ProjectionParams, NetError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    decode_params(&bytes)
}
