//! The base network: shared embeddings, stacked self-attention and
//! feed-forward layers per peer, and the tied prediction head.
//!
//! Everything is computed in `f64` on row-major [`Matrix`] buffers with
//! explicit backpropagation. Parameters are split into [`SharedTables`]
//! (one instance, used by every peer) and one [`PeerStack`] per peer.

mod backward;
mod forward;
pub mod math;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HailError, Result};
use crate::seed::{rng_for, Stream};

pub use backward::{backward, backward_sequence};
pub use forward::{
    attention_sublayer, embed, ffn_sublayer, forward_peer, forward_peer_cached, forward_sequence,
    layer_norm, PeerCache, SequenceCache, PAD_SCORE,
};

pub const DEFAULT_D: usize = 64;
pub const DEFAULT_D_HIDDEN: usize = 256;
pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_HEADS: usize = 2;
pub const INIT_STD: f64 = 0.02;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    /// |E| + 2 (pad and mask rows included).
    pub vocab_rows: usize,
    pub max_len: usize,
    pub d: usize,
    pub d_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub peers: usize,
    pub layer_norm: bool,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HailError::contract(m));
        if self.vocab_rows < 3 {
            return bad(format!("vocab_rows must be at least 3, got {}", self.vocab_rows));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.d_hidden == 0 || self.max_len == 0 {
            return bad("d_hidden and max_len must be positive".into());
        }
        if self.peers < 2 {
            return bad(format!("at least 2 peers required, got {}", self.peers));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Number of real elements |E|.
    pub fn elements(&self) -> usize {
        self.vocab_rows - 2
    }
}

/// γ and β of a layer normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

/// One encoder layer. The per-head projections `W_Q_r` (d × d/R) are the
/// column blocks `r·d/R .. (r+1)·d/R` of the d × d matrices `wq`, `wk`, `wv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayerParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    /// Post-residual normalization after the attention and the feed-forward
    /// sublayers, only when the shape enables it.
    pub norms: Option<[LayerNormParams; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerStack {
    pub layers: Vec<EncoderLayerParams>,
}

/// Parameters used by every peer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedTables {
    /// U: element embeddings, also the tied decoder.
    pub element: Matrix,
    /// S: positional embeddings.
    pub positional: Matrix,
    /// W_P
    pub pred_weight: Matrix,
    /// b_P
    pub pred_bias: Matrix,
    /// b_U
    pub out_bias: Matrix,
}

/// A full parameter set (also used as the gradient and optimizer-moment
/// containers, which share its layout).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub shared: SharedTables,
    pub peers: Vec<PeerStack>,
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

impl SharedTables {
    fn init<R: Rng + ?Sized>(shape: &ModelShape, rng: &mut R, std: f64) -> Self {
        SharedTables {
            element: truncated_normal(rng, shape.vocab_rows, shape.d, std),
            positional: truncated_normal(rng, shape.max_len, shape.d, std),
            pred_weight: truncated_normal(rng, shape.d, shape.d, std),
            pred_bias: Matrix::zeros(1, shape.d),
            out_bias: Matrix::zeros(1, shape.vocab_rows),
        }
    }
}

impl PeerStack {
    fn init<R: Rng + ?Sized>(shape: &ModelShape, rng: &mut R, std: f64) -> Self {
        let d = shape.d;
        let layers = (0..shape.layers)
            .map(|_| EncoderLayerParams {
                wq: truncated_normal(rng, d, d, std),
                wk: truncated_normal(rng, d, d, std),
                wv: truncated_normal(rng, d, d, std),
                wo: truncated_normal(rng, d, d, std),
                w1: truncated_normal(rng, d, shape.d_hidden, std),
                b1: Matrix::zeros(1, shape.d_hidden),
                w2: truncated_normal(rng, shape.d_hidden, d, std),
                b2: Matrix::zeros(1, d),
                norms: shape.layer_norm.then(|| {
                    let ln = || LayerNormParams {
                        gamma: Matrix::filled(1, d, 1.0),
                        beta: Matrix::zeros(1, d),
                    };
                    [ln(), ln()]
                }),
            })
            .collect();
        PeerStack { layers }
    }
}

macro_rules! layer_blocks {
    ($layer:expr, $prefix:expr, $out:expr, $($amp:tt)+) => {{
        let l = $layer;
        $out.push((format!("{}.W_Q", $prefix), $($amp)+ l.wq));
        $out.push((format!("{}.W_K", $prefix), $($amp)+ l.wk));
        $out.push((format!("{}.W_V", $prefix), $($amp)+ l.wv));
        $out.push((format!("{}.W_O", $prefix), $($amp)+ l.wo));
        $out.push((format!("{}.W_1", $prefix), $($amp)+ l.w1));
        $out.push((format!("{}.b_1", $prefix), $($amp)+ l.b1));
        $out.push((format!("{}.W_2", $prefix), $($amp)+ l.w2));
        $out.push((format!("{}.b_2", $prefix), $($amp)+ l.b2));
        if let Some([a, f]) = $($amp)+ l.norms {
            $out.push((format!("{}.ln_attn_gamma", $prefix), $($amp)+ a.gamma));
            $out.push((format!("{}.ln_attn_beta", $prefix), $($amp)+ a.beta));
            $out.push((format!("{}.ln_ffn_gamma", $prefix), $($amp)+ f.gamma));
            $out.push((format!("{}.ln_ffn_beta", $prefix), $($amp)+ f.beta));
        }
    }};
}

impl Params {
    /// Every parameter block with a stable name, in the fixed order used by
    /// checkpoints: shared tables first, then each peer's layers.
    pub fn blocks(&self) -> Vec<(String, &Matrix)> {
        let s = &self.shared;
        let mut out: Vec<(String, &Matrix)> = vec![
            ("shared.U".into(), &s.element),
            ("shared.S".into(), &s.positional),
            ("shared.W_P".into(), &s.pred_weight),
            ("shared.b_P".into(), &s.pred_bias),
            ("shared.b_U".into(), &s.out_bias),
        ];
        for (j, peer) in self.peers.iter().enumerate() {
            for (l, layer) in peer.layers.iter().enumerate() {
                layer_blocks!(layer, format!("peer{j}.layer{l}"), out, &);
            }
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let s = &mut self.shared;
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("shared.U".into(), &mut s.element),
            ("shared.S".into(), &mut s.positional),
            ("shared.W_P".into(), &mut s.pred_weight),
            ("shared.b_P".into(), &mut s.pred_bias),
            ("shared.b_U".into(), &mut s.out_bias),
        ];
        for (j, peer) in self.peers.iter_mut().enumerate() {
            for (l, layer) in peer.layers.iter_mut().enumerate() {
                layer_blocks!(layer, format!("peer{j}.layer{l}"), out, &mut);
            }
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, value: f64) {
        for (_, m) in self.blocks_mut() {
            m.fill(value);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|(_, m)| m.data.iter().all(|x| x.is_finite()))
    }
}

/// Parameter class of a block name: `peer1.layer0.W_Q` → `W_Q`, `shared.U` → `U`.
pub fn parameter_class(block_name: &str) -> &str {
    block_name.rsplit('.').next().unwrap_or(block_name)
}

/// Shared tables plus T independently initialized encoder stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct DualModel {
    pub shape: ModelShape,
    pub params: Params,
}

impl DualModel {
    /// Truncated-normal (±2σ, σ = 0.02) initialization; every peer draws from
    /// its own stream derived from `seed`.
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        let peer_seeds: Vec<u64> = (0..shape.peers)
            .map(|j| crate::seed::sub_seed(seed, Stream::PeerInit(j)))
            .collect();
        Self::with_seeds(shape, seed, &peer_seeds, INIT_STD)
    }

    /// Explicit per-peer initialization seeds.
    pub fn with_seeds(shape: ModelShape, shared_seed: u64, peer_seeds: &[u64], std: f64) -> Result<Self> {
        shape.validate()?;
        if peer_seeds.len() != shape.peers {
            return Err(HailError::contract("one seed per peer required"));
        }
        let mut rng = rng_for(shared_seed, Stream::SharedInit);
        let shared = SharedTables::init(&shape, &mut rng, std);
        let peers = peer_seeds
            .iter()
            .map(|&s| {
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(s);
                PeerStack::init(&shape, &mut rng, std)
            })
            .collect();
        Ok(DualModel {
            shape,
            params: Params { shared, peers },
        })
    }

    pub fn peers(&self) -> usize {
        self.shape.peers
    }
}

/// Logits and softmax probabilities over all |E| + 2 vocabulary rows for one
/// masked coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityRow {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ProbabilityRow {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = math::softmax(&logits);
        ProbabilityRow { logits, probs }
    }
}
