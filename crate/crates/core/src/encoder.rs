//! Frozen vision-language encoder stand-in.
//!
//! The image side is a ViT: patch embedding, learned-position tokens with a
//! [CLS] token, pre-norm transformer blocks, and a projection of the final
//! [CLS] into the joint space. The text side maps tokens to fixed embeddings
//! derived from the weight seed and pools them. All weights are drawn once
//! from `weight_seed` and never change.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, BlockConfig, Init, LayerNorm, Linear, ParamGroup, ParamStore, TransformerBlock};
use crate::ColorImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    /// Width `D` of the patch tokens.
    pub feature_dim: usize,
    /// Width `C` of the joint image/text space.
    pub joint_dim: usize,
    /// 1-based block indices whose patch tokens are exported.
    pub stage_set: Vec<usize>,
    pub weight_seed: u64,
    #[serde(default)]
    pub block: BlockConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 240,
            patch_size: 16,
            depth: 12,
            feature_dim: 64,
            joint_dim: 64,
            stage_set: vec![6, 9, 12],
            weight_seed: 0x00c1_1b3d,
            block: BlockConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.feature_dim < 8 || self.joint_dim < 8 {
            return Err(Error::invalid("feature and joint dims must be >= 8"));
        }
        if self.stage_set.is_empty() {
            return Err(Error::invalid("stage set is empty"));
        }
        if self.stage_set.iter().any(|&l| l == 0 || l > self.depth) {
            return Err(Error::invalid(format!(
                "stage set {:?} exceeds encoder depth {}",
                self.stage_set, self.depth
            )));
        }
        if self.block.heads == 0 || !self.feature_dim.is_multiple_of(self.block.heads) {
            return Err(Error::invalid("feature dim must be divisible by the head count"));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens `N_p`.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn last_stage(&self) -> usize {
        *self.stage_set.iter().max().expect("validated non-empty")
    }
}

/// Encoder output for one image: the projected [CLS] token and the patch
/// tokens of each exported stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub cls: Matrix,
    pub stages: BTreeMap<usize, Matrix>,
}

/// A set of text prompts, each possibly containing `{}` for the class name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub prompts: Vec<String>,
}

const TEMPLATES: [&str; 22] = [
    "a cropped photo of the {}.",
    "a cropped photo of a {}.",
    "a close-up photo of a {}.",
    "a close-up photo of the {}.",
    "a bright photo of a {}.",
    "a bright photo of the {}.",
    "a dark photo of the {}.",
    "a dark photo of a {}.",
    "a jpeg corrupted photo of a {}.",
    "a jpeg corrupted photo of the {}.",
    "a blurry photo of the {}.",
    "a blurry photo of a {}.",
    "a photo of a {}.",
    "a photo of the {}.",
    "a photo of a small {}.",
    "a photo of the small {}.",
    "a photo of a large {}.",
    "a photo of the large {}.",
    "a photo of the {} for visual inspection.",
    "a photo of a {} for visual inspection.",
    "a photo of the {} for anomaly detection.",
    "a photo of a {} for anomaly detection.",
];

const NORMAL_STATES: [&str; 7] = [
    "{}",
    "flawless {}",
    "perfect {}",
    "unblemished {}",
    "{} without flaw",
    "{} without defect",
    "{} without damage",
];

const ANOMALY_STATES: [&str; 4] = ["damaged {}", "{} with flaw", "{} with defect", "{} with damage"];

impl PromptSet {
    pub fn new(prompts: Vec<String>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::invalid("prompt set is empty"));
        }
        Ok(Self { prompts })
    }

    fn compose(states: &[&str]) -> Self {
        let prompts = states
            .iter()
            .flat_map(|state| TEMPLATES.iter().map(move |t| t.replace("{}", state)))
            .collect();
        Self { prompts }
    }

    /// Compositional ensemble of normal-state phrasings.
    pub fn normal_default() -> Self {
        Self::compose(&NORMAL_STATES)
    }

    /// Compositional ensemble of anomalous-state phrasings.
    pub fn anomaly_default() -> Self {
        Self::compose(&ANOMALY_STATES)
    }

    /// Reads one prompt per non-empty line.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let prompts: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::new(prompts).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "no prompts in file".into(),
        })
    }

    /// Substitutes `class_name` for every `{}`.
    pub fn for_class(&self, class_name: &str) -> Self {
        Self {
            prompts: self.prompts.iter().map(|p| p.replace("{}", class_name)).collect(),
        }
    }
}

fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    store: ParamStore,
    patch_embed: Linear,
    cls_token: crate::nn::ParamId,
    pos_embed: crate::nn::ParamId,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    cls_proj: Linear,
    text_proj: Linear,
}

impl FrozenEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Frozen;
        let d = config.feature_dim;
        let patch_len = config.patch_size * config.patch_size * 3;
        let mut store = ParamStore::new();
        let mut init = Init::new(derive_seed(config.weight_seed, "image"));
        let patch_embed = Linear::new(&mut store, "patch_embed", g, &mut init, patch_len, d, 1.0);
        let cls_token = store.add("cls_token", g, init.normal(1, d, 1.0));
        let pos_embed = store.add("pos_embed", g, init.normal(config.num_patches() + 1, d, 0.1));
        let residual_gain = 1.0 / (config.depth as f64).sqrt();
        let blocks = (0..config.depth)
            .map(|i| {
                TransformerBlock::new(
                    &mut store,
                    &format!("block{}", i + 1),
                    g,
                    &mut init,
                    d,
                    config.block,
                    residual_gain,
                )
            })
            .collect();
        let final_norm = LayerNorm::new(&mut store, "final_norm", g, d);
        let cls_proj = Linear::new(&mut store, "cls_proj", g, &mut init, d, config.joint_dim, 1.0);
        let mut text_init = Init::new(derive_seed(config.weight_seed, "text"));
        let text_proj = Linear::new(
            &mut store,
            "text_proj",
            g,
            &mut text_init,
            config.joint_dim,
            config.joint_dim,
            1.0,
        );
        Ok(Self {
            config,
            store,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            final_norm,
            cls_proj,
            text_proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Checksum of every encoder weight.
    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    pub fn weights(&self) -> &ParamStore {
        &self.store
    }

    fn patchify(&self, image: &ColorImage) -> Matrix {
        let p = self.config.patch_size;
        let side = self.config.grid_side();
        let mut out = Matrix::zeros((side * side, p * p * 3));
        for (idx, mut row) in out.rows_mut().into_iter().enumerate() {
            let (pr, pc) = (idx / side, idx % side);
            let patch = image.slice(s![pr * p..(pr + 1) * p, pc * p..(pc + 1) * p, ..]);
            for (dst, src) in row.iter_mut().zip(patch.iter()) {
                *dst = (src - 0.5) / 0.25;
            }
        }
        out
    }

    pub fn encode_image(&self, image: &ColorImage) -> Result<EmbeddingBundle> {
        let s = self.config.image_size;
        if image.dim() != (s, s, 3) {
            return Err(Error::invalid(format!(
                "encoder expects a {s}x{s}x3 image, got {:?}",
                image.dim()
            )));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        let store = &self.store;
        let mut x = {
            let mut tape = Tape::new();
            let patches = tape.leaf(self.patchify(image));
            let tokens = self.patch_embed.forward(&mut tape, store, patches);
            let cls = tape.param(store, self.cls_token);
            let seq = tape.concat_rows(&[cls, tokens]);
            let pos = tape.param(store, self.pos_embed);
            let x = tape.add(seq, pos);
            tape.value(x).clone()
        };
        let mut stages = BTreeMap::new();
        for (i, block) in self.blocks.iter().enumerate() {
            // one tape per block keeps peak memory at a single block's activations
            let mut tape = Tape::new();
            let xin = tape.leaf(x);
            let y = block.forward(&mut tape, store, xin);
            x = tape.value(y).clone();
            if self.config.stage_set.contains(&(i + 1)) {
                stages.insert(i + 1, x.slice(s![1.., ..]).to_owned());
            }
        }
        let mut tape = Tape::new();
        let cls = tape.leaf(x.slice(s![0..1, ..]).to_owned());
        let cls = self.final_norm.forward(&mut tape, store, cls);
        let cls = self.cls_proj.forward(&mut tape, store, cls);
        Ok(EmbeddingBundle {
            cls: tape.value(cls).clone(),
            stages,
        })
    }

    fn token_embedding(&self, token: &str) -> Matrix {
        let mut init = Init::new(derive_seed(self.config.weight_seed, &format!("token:{token}")));
        init.normal(1, self.config.joint_dim, 1.0)
    }

    fn embed_prompt(&self, prompt: &str) -> Matrix {
        let tokens = tokenize(prompt);
        let c = self.config.joint_dim;
        let mut pooled = Matrix::zeros((1, c));
        for t in &tokens {
            pooled += &self.token_embedding(t);
        }
        if !tokens.is_empty() {
            pooled /= tokens.len() as f64;
        }
        let mut tape = Tape::new();
        let x = tape.leaf(pooled);
        let y = self.text_proj.forward(&mut tape, &self.store, x);
        let y = tape.add(y, x);
        tape.value(y).clone()
    }

    /// Mean of the embeddings of every prompt in the set.
    pub fn encode_text(&self, prompts: &PromptSet) -> Result<Matrix> {
        if prompts.prompts.is_empty() {
            return Err(Error::invalid("prompt set is empty"));
        }
        let mut sum = Matrix::zeros((1, self.config.joint_dim));
        for p in &prompts.prompts {
            sum += &self.embed_prompt(p);
        }
        Ok(sum / prompts.prompts.len() as f64)
    }

    /// Encodes several images in parallel; results keep the input order.
    pub fn encode_batch(&self, images: &[&ColorImage]) -> Result<Vec<EmbeddingBundle>> {
        use rayon::prelude::*;
        images.par_iter().map(|img| self.encode_image(img)).collect()
    }
}

/// Stacks the given stage features of a bundle, in stage order.
pub fn stage_features(bundle: &EmbeddingBundle, stage: usize) -> Result<&Matrix> {
    bundle
        .stages
        .get(&stage)
        .ok_or_else(|| Error::invalid(format!("stage {stage} missing from embedding bundle")))
}

#[cfg(test)]
fn cosine(a: &Matrix, b: &Matrix) -> f64 {
    let dot = (a * b).sum();
    let na = a.map(|v| v * v).sum().sqrt();
    let nb = b.map(|v| v * v).sum().sqrt();
    dot / (na * nb)
}
