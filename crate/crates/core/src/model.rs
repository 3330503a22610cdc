//! The trainable pipeline assembled around a frozen encoder: three adapters,
//! the coarse-to-fine decoder and, optionally, multi-view fusion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adaptation::{
    adapt_seg_text, anomaly_map_var, similarity_logits, Adapter, AdapterConfig, AnomalyMap, CoarseToFineDecoder,
    DecoderConfig, Upsampler, GAMMA,
};
use crate::autodiff::{Matrix, Tape, Var};
use crate::encoder::{EmbeddingBundle, EncoderConfig, FrozenEncoder, PromptSet};
use crate::error::{Error, Result};
use crate::fusion::{enhance_var, FusionConfig, MultiViewFusion};
use crate::nn::{derive_seed, Init, ParamGroup, ParamStore};
use crate::scoring::{classification_score_with, ScorePair, TAU};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default = "yes")]
    pub multiview: bool,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_init_seed")]
    pub init_seed: u64,
}

fn yes() -> bool {
    true
}

fn default_gamma() -> f64 {
    GAMMA
}

fn default_tau() -> f64 {
    TAU
}

fn default_init_seed() -> u64 {
    0x5eed_0001
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            decoder: DecoderConfig::default(),
            fusion: FusionConfig::default(),
            multiview: true,
            gamma: GAMMA,
            tau: TAU,
            init_seed: default_init_seed(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.gamma > 0.0) || !(self.tau > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        if !(0.0..=1.0).contains(&self.adapter.alpha) {
            return Err(Error::invalid("adapter alpha must lie in [0, 1]"));
        }
        if self.multiview && self.fusion.views == 0 {
            return Err(Error::invalid("fusion needs at least one view"));
        }
        Ok(())
    }
}

/// Frozen text embeddings of the normal and anomalous prompt sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    pub normal: Matrix,
    pub anomalous: Matrix,
}

impl TextEmbeddings {
    pub fn encode(
        encoder: &FrozenEncoder,
        class_name: &str,
        normal: &PromptSet,
        anomalous: &PromptSet,
    ) -> Result<Self> {
        Ok(Self {
            normal: encoder.encode_text(&normal.for_class(class_name))?,
            anomalous: encoder.encode_text(&anomalous.for_class(class_name))?,
        })
    }

    pub fn default_for(encoder: &FrozenEncoder, class_name: &str) -> Result<Self> {
        Self::encode(
            encoder,
            class_name,
            &PromptSet::normal_default(),
            &PromptSet::anomaly_default(),
        )
    }
}

/// Encoder output for one RGB image and, when fusion is used, its rendered views.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub bundle: EmbeddingBundle,
    pub views: Option<Vec<EmbeddingBundle>>,
}

#[derive(Debug, Clone, Copy)]
pub struct ImageVars {
    /// Adapted (and possibly fused) global embedding, `1×C`.
    pub i_a: Var,
    /// Decoded (and possibly fused) patch features, `N_p×C`.
    pub features: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct TextVars {
    pub t_c_plus: Var,
    pub t_c_minus: Var,
    pub t_s: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub score: ScorePair,
    pub map: AnomalyMap,
}

#[derive(Debug, Clone)]
pub struct Clip3dModel {
    config: ModelConfig,
    store: ParamStore,
    image_adapter: Adapter,
    class_adapter: Adapter,
    seg_adapter: Adapter,
    decoder: CoarseToFineDecoder,
    fusion: Option<MultiViewFusion>,
    upsampler: Upsampler,
}

impl Clip3dModel {
    /// Each component draws from its own seed stream, so adding or removing
    /// fusion leaves every other parameter unchanged. Fusion parameters come
    /// last in the store.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let enc = &config.encoder;
        let (c, d) = (enc.joint_dim, enc.feature_dim);
        let seed = config.init_seed;
        let mut store = ParamStore::new();
        let image_adapter = Adapter::new(
            &mut store,
            "image_adapter",
            ParamGroup::ImageAdapter,
            &mut Init::new(derive_seed(seed, "image_adapter")),
            c,
            config.adapter,
        );
        let class_adapter = Adapter::new(
            &mut store,
            "class_text_adapter",
            ParamGroup::ClassText,
            &mut Init::new(derive_seed(seed, "class_text_adapter")),
            c,
            config.adapter,
        );
        let seg_adapter = Adapter::new(
            &mut store,
            "seg_text_adapter",
            ParamGroup::SegText,
            &mut Init::new(derive_seed(seed, "seg_text_adapter")),
            c,
            config.adapter,
        );
        let decoder = CoarseToFineDecoder::new(
            &mut store,
            &mut Init::new(derive_seed(seed, "decoder")),
            &enc.stage_set,
            d,
            c,
            config.decoder,
        );
        let fusion = config.multiview.then(|| {
            MultiViewFusion::new(
                &mut store,
                &mut Init::new(derive_seed(seed, "fusion")),
                d,
                c,
                config.fusion,
            )
        });
        let upsampler = Upsampler::new(enc.grid_side(), enc.image_size, enc.image_size);
        Ok(Self {
            config,
            store,
            image_adapter,
            class_adapter,
            seg_adapter,
            decoder,
            fusion,
            upsampler,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn has_fusion(&self) -> bool {
        self.fusion.is_some()
    }

    pub fn image_adapter(&self) -> &Adapter {
        &self.image_adapter
    }

    pub fn class_adapter(&self) -> &Adapter {
        &self.class_adapter
    }

    pub fn seg_adapter(&self) -> &Adapter {
        &self.seg_adapter
    }

    pub fn decoder(&self) -> &CoarseToFineDecoder {
        &self.decoder
    }

    pub fn fusion(&self) -> Option<&MultiViewFusion> {
        self.fusion.as_ref()
    }

    /// Drops the fusion module and its parameters.
    pub fn without_fusion(mut self) -> Self {
        if self.fusion.take().is_some() {
            let keep: Vec<_> = self
                .store
                .iter()
                .filter(|p| p.group != ParamGroup::Fusion)
                .cloned()
                .collect();
            let mut store = ParamStore::new();
            for p in keep {
                store.add(p.name, p.group, p.value);
            }
            self.store = store;
        }
        self.config.multiview = false;
        self
    }

    /// Overwrites parameters by name. Every stored parameter must be supplied
    /// exactly once with a matching shape.
    pub fn load_params(&mut self, params: &[(String, Matrix)]) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(Error::invalid(format!(
                "model has {} parameters, checkpoint supplies {}",
                self.store.len(),
                params.len()
            )));
        }
        for (name, value) in params {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
            let slot = self.store.value_mut(id);
            if slot.dim() != value.dim() {
                return Err(Error::invalid(format!(
                    "parameter {name} is {:?}, checkpoint has {:?}",
                    slot.dim(),
                    value.dim()
                )));
            }
            slot.assign(value);
        }
        Ok(())
    }

    pub fn text_forward(&self, tape: &mut Tape, text: &TextEmbeddings) -> TextVars {
        let s = &self.store;
        let t_plus = tape.leaf(text.normal.clone());
        let t_minus = tape.leaf(text.anomalous.clone());
        TextVars {
            t_c_plus: self.class_adapter.forward(tape, s, t_plus),
            t_c_minus: self.class_adapter.forward(tape, s, t_minus),
            t_s: adapt_seg_text(tape, s, &self.seg_adapter, t_plus, t_minus),
        }
    }

    fn views<'e>(&self, image: &'e EncodedImage) -> Result<&'e [EmbeddingBundle]> {
        image
            .views
            .as_deref()
            .ok_or_else(|| Error::invalid("multi-view fusion is enabled but no views were encoded"))
    }

    /// Adapted global embedding `I_A`, plus the fused global term when fusion is on.
    pub fn global_forward(&self, tape: &mut Tape, image: &EncodedImage) -> Result<Var> {
        let s = &self.store;
        let cls = tape.leaf(image.bundle.cls.clone());
        let i_a = self.image_adapter.forward(tape, s, cls);
        let Some(fusion) = &self.fusion else {
            return Ok(i_a);
        };
        let cls_views: Vec<Var> = self.views(image)?.iter().map(|v| tape.leaf(v.cls.clone())).collect();
        let global = fusion.global_fuse(tape, s, &cls_views)?;
        enhance_var(tape, i_a, global)
    }

    /// Decoded patch features `F`, plus the fused local term when fusion is on.
    pub fn local_forward(&self, tape: &mut Tape, image: &EncodedImage) -> Result<Var> {
        let s = &self.store;
        let stages: BTreeMap<usize, Var> = image
            .bundle
            .stages
            .iter()
            .map(|(l, m)| (*l, tape.leaf(m.clone())))
            .collect();
        let features = self.decoder.forward(tape, s, &stages)?;
        let Some(fusion) = &self.fusion else {
            return Ok(features);
        };
        let last = self.config.encoder.last_stage();
        let feat_views = self
            .views(image)?
            .iter()
            .map(|v| {
                let f = v
                    .stages
                    .get(&last)
                    .ok_or_else(|| Error::invalid(format!("view is missing stage {last}")))?;
                Ok(tape.leaf(f.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let local = fusion.local_fuse(tape, s, &feat_views)?;
        enhance_var(tape, features, local)
    }

    pub fn image_forward(&self, tape: &mut Tape, image: &EncodedImage) -> Result<ImageVars> {
        Ok(ImageVars {
            i_a: self.global_forward(tape, image)?,
            features: self.local_forward(tape, image)?,
        })
    }

    /// Full-resolution anomaly map from decoded features, as a tape node.
    pub fn map_forward(&self, tape: &mut Tape, features: Var, text: &TextVars) -> Result<Var> {
        let logits = similarity_logits(tape, features, text.t_s, self.config.gamma)?;
        anomaly_map_var(tape, logits, &self.upsampler)
    }

    pub fn predict(&self, image: &EncodedImage, text: &TextEmbeddings) -> Result<Prediction> {
        let mut tape = Tape::new();
        let t = self.text_forward(&mut tape, text);
        let v = self.image_forward(&mut tape, image)?;
        let map = self.map_forward(&mut tape, v.features, &t)?;
        let values = tape.value(map).mapv(|x| x.clamp(0.0, 1.0));
        let map = AnomalyMap { values };
        let score = classification_score_with(
            tape.value(v.i_a),
            tape.value(t.t_c_plus),
            tape.value(t.t_c_minus),
            map.max(),
            self.config.tau,
        )?;
        Ok(Prediction { score, map })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FrozenEncoder;
    use crate::ColorImage;

    fn small_config(multiview: bool) -> ModelConfig {
        let mut config = ModelConfig {
            multiview,
            ..ModelConfig::default()
        };
        config.encoder.image_size = 64;
        config.encoder.feature_dim = 16;
        config.encoder.joint_dim = 16;
        config.encoder.depth = 3;
        config.encoder.stage_set = vec![1, 2, 3];
        config
    }

    fn encoded(encoder: &FrozenEncoder, views: bool) -> EncodedImage {
        let img = ColorImage::from_shape_fn((64, 64, 3), |(r, c, ch)| ((r * 3 + c * 5 + ch * 7) % 17) as f64 / 16.0);
        let bundle = encoder.encode_image(&img).unwrap();
        let views = views.then(|| vec![bundle.clone(); 5]);
        EncodedImage { bundle, views }
    }

    #[test]
    fn fusion_parameters_come_last_and_strip_cleanly() {
        let full = Clip3dModel::new(small_config(true)).unwrap();
        let bare = Clip3dModel::new(small_config(false)).unwrap();
        let stripped = full.clone().without_fusion();
        assert_eq!(stripped.store(), bare.store());
        let n = bare.store().len();
        assert!(full.store().iter().skip(n).all(|p| p.group == ParamGroup::Fusion));
        assert!(full.store().iter().take(n).all(|p| p.group != ParamGroup::Fusion));
    }

    #[test]
    fn predict_shapes_and_ranges() {
        let config = small_config(true);
        let encoder = FrozenEncoder::new(config.encoder.clone()).unwrap();
        let text = TextEmbeddings::default_for(&encoder, "widget").unwrap();
        let model = Clip3dModel::new(config).unwrap();
        let p = model.predict(&encoded(&encoder, true), &text).unwrap();
        assert_eq!(p.map.values.dim(), (64, 64));
        assert!(p.map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((p.score.s_plus + p.score.s_minus - 1.0).abs() < 1e-12);
        assert!(model.predict(&encoded(&encoder, false), &text).is_err());
    }

    #[test]
    fn stripped_model_matches_bare_model() {
        let encoder = FrozenEncoder::new(small_config(false).encoder).unwrap();
        let text = TextEmbeddings::default_for(&encoder, "widget").unwrap();
        let bare = Clip3dModel::new(small_config(false)).unwrap();
        let stripped = Clip3dModel::new(small_config(true)).unwrap().without_fusion();
        let img = encoded(&encoder, true);
        assert_eq!(
            bare.predict(&img, &text).unwrap(),
            stripped.predict(&img, &text).unwrap()
        );
    }

    #[test]
    fn load_params_checks_names_and_shapes() {
        let mut model = Clip3dModel::new(small_config(false)).unwrap();
        let mut params: Vec<(String, Matrix)> = model
            .store()
            .iter()
            .map(|p| (p.name.clone(), p.value.mapv(|v| v * 2.0)))
            .collect();
        model.load_params(&params).unwrap();
        params[0].1 = Matrix::zeros((1, 1));
        assert!(model.load_params(&params).is_err());
        params.pop();
        assert!(model.load_params(&params).is_err());
    }
}
