//! Parameter storage and the layers shared by the encoder, adapters, decoder
//! and fusion module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Matrix, Tape, Var};

/// Which optimizer group a parameter belongs to. Each group has its own
/// learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    ClassText,
    SegText,
    ImageAdapter,
    Decoder,
    Fusion,
    /// Never handed to an optimizer.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// SHA-256 over names, shapes and the exact bits of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update((p.value.nrows() as u64).to_le_bytes());
            h.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Seeded initializer; one per module so modules never share a random stream.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Matrix::from_shape_fn((rows, cols), |_| dist.sample(&mut self.rng))
    }
}

/// Mixes a base seed with a stream label so derived seeds are independent.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// `y = x W + b`, with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        init: &mut Init,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), group, init.normal(fan_in, fan_out, std));
        let bias = store.add(format!("{name}.bias"), group, Matrix::zeros((1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).nrows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).ncols()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), group, Matrix::ones((1, width)));
        let bias = store.add(format!("{name}.bias"), group, Matrix::zeros((1, width)));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.layer_norm_rows(x, LN_EPS);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { heads: 4, mlp_ratio: 2 }
    }
}

/// Pre-norm transformer block: multi-head self-attention then a GELU MLP, each
/// wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm_attn: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm_mlp: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    width: usize,
    heads: usize,
}

impl TransformerBlock {
    /// `residual_gain` scales the init of the two layers that write back into
    /// the residual stream.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        init: &mut Init,
        width: usize,
        config: BlockConfig,
        residual_gain: f64,
    ) -> Self {
        assert!(
            config.heads > 0 && width.is_multiple_of(config.heads),
            "width {width} not divisible by {} heads",
            config.heads
        );
        let hidden = width * config.mlp_ratio;
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), group, width),
            qkv: Linear::new(store, &format!("{name}.qkv"), group, init, width, 3 * width, 1.0),
            proj: Linear::new(store, &format!("{name}.proj"), group, init, width, width, residual_gain),
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), group, width),
            fc1: Linear::new(store, &format!("{name}.fc1"), group, init, width, hidden, 1.0),
            fc2: Linear::new(store, &format!("{name}.fc2"), group, init, hidden, width, residual_gain),
            width,
            heads: config.heads,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.norm_attn.forward(tape, store, x);
        let qkv = self.qkv.forward(tape, store, h);
        let merged = tape.attention(qkv, self.heads);
        let attn_out = self.proj.forward(tape, store, merged);
        let x = tape.add(x, attn_out);

        let h = self.norm_mlp.forward(tape, store, x);
        let h = self.fc1.forward(tape, store, h);
        let h = tape.gelu(h);
        let mlp_out = self.fc2.forward(tape, store, h);
        tape.add(x, mlp_out)
    }
}
