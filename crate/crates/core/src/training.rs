//! Losses, the Adam optimizer, the few-shot training loop and gradient checks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::adapt_seg_text;
use crate::autodiff::{bce_mean, softplus, Matrix, Tape, Var};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::geometry::PointCloudGrid;
use crate::model::{Clip3dModel, EncodedImage, ModelConfig, TextEmbeddings};
use crate::nn::{derive_seed, ParamGroup, ParamStore};
use crate::render::{render_selected, RenderConfig};
use crate::scoring::cosine_similarity;
use crate::synth::{procedural_source, synthesize_anomaly, SynthParams};
use crate::{ColorImage, Mask};

/// Clamp applied to predictions inside the segmentation BCE.
pub const BCE_EPS: f64 = 1e-7;

/// Radius the point cloud is scaled to before rendering.
pub const RENDER_RADIUS: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l_con: f64,
    pub l_seg: f64,
    pub l_tot: f64,
}

/// `softplus(b - a) = -ln(eᵃ / (eᵃ + eᵇ))`.
fn log_ratio(a: f64, b: f64) -> f64 {
    softplus(b - a)
}

/// Image-to-text, text-to-image and bidirectional contrastive losses over
/// raw cosine similarities (no temperature).
pub fn contrastive_losses(
    i_plus: &Matrix,
    i_minus: &Matrix,
    t_plus: &Matrix,
    t_minus: &Matrix,
) -> Result<(f64, f64, f64)> {
    let pp = cosine_similarity(i_plus, t_plus)?;
    let pm = cosine_similarity(i_plus, t_minus)?;
    let mp = cosine_similarity(i_minus, t_plus)?;
    let mm = cosine_similarity(i_minus, t_minus)?;
    let i2t = log_ratio(pp, pm) + log_ratio(mm, mp);
    let t2i = log_ratio(pp, mp) + log_ratio(mm, pm);
    Ok((i2t, t2i, (i2t + t2i) * 0.5))
}

fn cosine_var(tape: &mut Tape, a: Var, b: Var) -> Var {
    let na = tape.l2_normalize_rows(a);
    let nb = tape.l2_normalize_rows(b);
    let bt = tape.transpose(nb);
    tape.matmul(na, bt)
}

fn log_ratio_var(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(b, a);
    tape.softplus(d)
}

/// Differentiable counterpart of [`contrastive_losses`]: `(l_i2t, l_t2i, l_con)`.
pub fn contrastive_vars(
    tape: &mut Tape,
    i_plus: Var,
    i_minus: Var,
    t_plus: Var,
    t_minus: Var,
) -> Result<(Var, Var, Var)> {
    for v in [i_plus, i_minus, t_plus, t_minus] {
        if tape.shape(v).0 != 1 {
            return Err(Error::invalid("contrastive loss expects 1xC embeddings"));
        }
        if tape.value(v).iter().all(|x| *x == 0.0) {
            return Err(Error::NumericDegeneracy(
                "zero-norm embedding in contrastive loss".into(),
            ));
        }
    }
    let pp = cosine_var(tape, i_plus, t_plus);
    let pm = cosine_var(tape, i_plus, t_minus);
    let mp = cosine_var(tape, i_minus, t_plus);
    let mm = cosine_var(tape, i_minus, t_minus);
    let a = log_ratio_var(tape, pp, pm);
    let b = log_ratio_var(tape, mm, mp);
    let i2t = tape.add(a, b);
    let a = log_ratio_var(tape, pp, mp);
    let b = log_ratio_var(tape, mm, pm);
    let t2i = tape.add(a, b);
    let sum = tape.add(i2t, t2i);
    let con = tape.scale(sum, 0.5);
    Ok((i2t, t2i, con))
}

fn mask_values(mask: &Mask) -> Matrix {
    mask.mapv(|m| if m { 1.0 } else { 0.0 })
}

/// Mean binary cross-entropy between an anomaly map and a mask, with the map
/// clamped to `[1e-7, 1 - 1e-7]`.
pub fn seg_loss(s_map: &Array2<f64>, mask: &Mask) -> Result<f64> {
    if s_map.dim() != mask.dim() {
        return Err(Error::invalid(format!(
            "anomaly map is {:?} but the mask is {:?}",
            s_map.dim(),
            mask.dim()
        )));
    }
    Ok(bce_mean(s_map, &mask_values(mask), BCE_EPS))
}

pub fn total_loss(l_con: f64, l_seg: f64) -> f64 {
    l_seg + l_con
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub class_text: f64,
    pub seg_text: f64,
    pub image_adapter: f64,
    pub decoder: f64,
    pub fusion: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            class_text: 1e-5,
            seg_text: 5e-5,
            image_adapter: 5e-4,
            decoder: 5e-4,
            fusion: 1e-4,
        }
    }
}

impl LearningRates {
    /// `None` for parameters that must never be updated.
    pub fn for_group(&self, group: ParamGroup) -> Option<f64> {
        match group {
            ParamGroup::ClassText => Some(self.class_text),
            ParamGroup::SegText => Some(self.seg_text),
            ParamGroup::ImageAdapter => Some(self.image_adapter),
            ParamGroup::Decoder => Some(self.decoder),
            ParamGroup::Fusion => Some(self.fusion),
            ParamGroup::Frozen => None,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.class_text,
            self.seg_text,
            self.image_adapter,
            self.decoder,
            self.fusion,
        ];
        if all.iter().any(|lr| !(*lr > 0.0) || !lr.is_finite()) {
            return Err(Error::invalid("learning rates must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub k_shot: usize,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rates: LearningRates,
    pub adam: AdamConfig,
    pub synth: SynthParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_shot: 2,
            epochs: 200,
            seed: 0,
            learning_rates: LearningRates::default(),
            adam: AdamConfig::default(),
            synth: SynthParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_shot == 0 {
            return Err(Error::invalid("k_shot must be at least 1"));
        }
        self.learning_rates.validate()?;
        self.synth.validate()
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|p| Matrix::zeros(p.value.dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], lrs: &LearningRates, cfg: &AdamConfig) {
        assert_eq!(
            grads.len(),
            self.m.len(),
            "gradient count does not match the optimizer state"
        );
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let Some(lr) = lrs.for_group(p.group) else {
                continue;
            };
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= lr * mh / (vh.sqrt() + cfg.eps);
                });
        }
    }
}

/// One optimization example: a normal image, its synthesized anomalous
/// counterpart and the anomaly mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x_plus: EncodedImage,
    pub x_minus: EncodedImage,
    pub mask: Mask,
}

/// Forward pass and loss terms without touching parameters.
pub fn evaluate_losses(model: &Clip3dModel, pair: &TrainingPair, text: &TextEmbeddings) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let (_, losses) = build_loss(&mut tape, model, pair, text)?;
    Ok(losses)
}

fn build_loss(
    tape: &mut Tape,
    model: &Clip3dModel,
    pair: &TrainingPair,
    text: &TextEmbeddings,
) -> Result<(Var, LossBreakdown)> {
    let t = model.text_forward(tape, text);
    let plus = model.global_forward(tape, &pair.x_plus)?;
    let minus = model.image_forward(tape, &pair.x_minus)?;
    let (i2t, t2i, con) = contrastive_vars(tape, plus, minus.i_a, t.t_c_plus, t.t_c_minus)?;
    let map = model.map_forward(tape, minus.features, &t)?;
    if tape.shape(map) != pair.mask.dim() {
        return Err(Error::invalid(format!(
            "anomaly map is {:?} but the mask is {:?}",
            tape.shape(map),
            pair.mask.dim()
        )));
    }
    let seg = tape.bce(map, &mask_values(&pair.mask), BCE_EPS);
    let tot = tape.add(seg, con);
    let losses = LossBreakdown {
        l_i2t: tape.scalar(i2t),
        l_t2i: tape.scalar(t2i),
        l_con: tape.scalar(con),
        l_seg: tape.scalar(seg),
        l_tot: tape.scalar(tot),
    };
    Ok((tot, losses))
}

fn check_finite(losses: &LossBreakdown, step: usize) -> Result<()> {
    let terms = [
        ("l_i2t", losses.l_i2t),
        ("l_t2i", losses.l_t2i),
        ("l_seg", losses.l_seg),
    ];
    for (name, v) in terms {
        if !v.is_finite() {
            return Err(Error::Diverged {
                term: name.into(),
                step,
            });
        }
    }
    Ok(())
}

/// One forward/backward pass over a pair followed by an Adam update. The
/// store is left untouched when any loss term or gradient is non-finite.
pub fn train_step(
    model: &mut Clip3dModel,
    adam: &mut Adam,
    pair: &TrainingPair,
    text: &TextEmbeddings,
    config: &TrainConfig,
    step: usize,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let (root, losses) = build_loss(&mut tape, model, pair, text)?;
    check_finite(&losses, step)?;
    let grads = tape.backward(root).param_grads(model.store());
    if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Diverged {
            term: format!(
                "gradient of {}",
                model.store().iter().nth(i).map_or("?", |p| p.name.as_str())
            ),
            step,
        });
    }
    adam.step(model.store_mut(), &grads, &config.learning_rates, &config.adam);
    Ok(losses)
}

/// A normal training sample: an RGB image and its co-registered point grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotSample {
    pub image: ColorImage,
    pub cloud: PointCloudGrid,
}

/// Encodes an image and, when `render` is given, its selected views.
pub fn encode_with_views(
    encoder: &FrozenEncoder,
    image: &ColorImage,
    cloud: &PointCloudGrid,
    render: Option<&RenderConfig>,
) -> Result<EncodedImage> {
    let Some(render) = render else {
        return Ok(EncodedImage {
            bundle: encoder.encode_image(image)?,
            views: None,
        });
    };
    let normalized = cloud.normalized(RENDER_RADIUS);
    let views = render_selected(
        &normalized,
        image,
        &render.grid()?,
        &render.selected_views,
        &render.camera()?,
        render,
    )?;
    let mut images: Vec<&ColorImage> = vec![image];
    images.extend(views.iter().map(|v| &v.image));
    let mut bundles = encoder.encode_batch(&images)?;
    let view_bundles = bundles.split_off(1);
    Ok(EncodedImage {
        bundle: bundles.pop().expect("one image bundle"),
        views: Some(view_bundles),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub shot: usize,
    pub anomaly_seed: u64,
    pub mask_fraction: f64,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub encoder_checksum: String,
}

struct PreparedShot {
    image: ColorImage,
    depth: Array2<f64>,
    cloud: PointCloudGrid,
    encoded: EncodedImage,
}

/// Runs epochs over the K shots, synthesizing a fresh anomaly for every step.
pub struct Trainer<'a> {
    encoder: &'a FrozenEncoder,
    render: Option<&'a RenderConfig>,
    text: TextEmbeddings,
    config: TrainConfig,
    shots: Vec<PreparedShot>,
}

impl<'a> Trainer<'a> {
    /// `render` is `None` when the model has no fusion module; views are then
    /// never rendered. Uses the first `config.k_shot` samples.
    pub fn new(
        encoder: &'a FrozenEncoder,
        render: Option<&'a RenderConfig>,
        text: TextEmbeddings,
        config: TrainConfig,
        samples: &[ShotSample],
    ) -> Result<Self> {
        config.validate()?;
        if samples.len() < config.k_shot {
            return Err(Error::invalid(format!(
                "{}-shot training needs {} samples, got {}",
                config.k_shot,
                config.k_shot,
                samples.len()
            )));
        }
        let shots = samples[..config.k_shot]
            .iter()
            .map(|s| {
                Ok(PreparedShot {
                    image: s.image.clone(),
                    depth: s.cloud.depth_map(),
                    cloud: s.cloud.clone(),
                    encoded: encode_with_views(encoder, &s.image, &s.cloud, render)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder,
            render,
            text,
            config,
            shots,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Seed of the anomaly synthesized for `shot` in `epoch`.
    pub fn step_seed(&self, epoch: usize, shot: usize) -> u64 {
        derive_seed(self.config.seed, &format!("epoch{epoch}/shot{shot}"))
    }

    fn make_pair(&self, epoch: usize, shot: usize) -> Result<(TrainingPair, u64)> {
        let s = &self.shots[shot];
        let seed = self.step_seed(epoch, shot);
        let (h, w, _) = s.image.dim();
        let source = procedural_source(h, w, derive_seed(seed, "source"));
        let sample = synthesize_anomaly(&s.image, &s.depth, &source, &self.config.synth, seed)?;
        let x_minus = encode_with_views(self.encoder, &sample.x_minus, &s.cloud, self.render)?;
        Ok((
            TrainingPair {
                x_plus: s.encoded.clone(),
                x_minus,
                mask: sample.mask,
            },
            seed,
        ))
    }

    pub fn run(&self, model: &mut Clip3dModel, mut observe: impl FnMut(&StepRecord)) -> Result<TrainReport> {
        if model.has_fusion() != self.render.is_some() {
            return Err(Error::invalid(
                "render configuration must be given exactly when the model has fusion",
            ));
        }
        let checksum = self.encoder.checksum();
        let mut adam = Adam::new(model.store());
        let mut steps = Vec::with_capacity(self.config.epochs * self.shots.len());
        for epoch in 0..self.config.epochs {
            for shot in 0..self.shots.len() {
                let (pair, seed) = self.make_pair(epoch, shot)?;
                let step = steps.len();
                let losses = train_step(model, &mut adam, &pair, &self.text, &self.config, step)?;
                let fraction = pair.mask.iter().filter(|m| **m).count() as f64 / pair.mask.len() as f64;
                let record = StepRecord {
                    step,
                    epoch,
                    shot,
                    anomaly_seed: seed,
                    mask_fraction: fraction,
                    losses,
                };
                observe(&record);
                steps.push(record);
            }
        }
        if self.encoder.checksum() != checksum {
            return Err(Error::invalid("encoder weights changed during training"));
        }
        Ok(TrainReport {
            steps,
            encoder_checksum: checksum,
        })
    }
}

/// Components whose gradients can be verified by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    ImageAdapter,
    ClassTextAdapter,
    SegTextAdapter,
    Decoder,
    GlobalFuse,
    LocalFuse,
    Encoder,
}

impl Component {
    pub const TRAINABLE: [Component; 6] = [
        Component::ImageAdapter,
        Component::ClassTextAdapter,
        Component::SegTextAdapter,
        Component::Decoder,
        Component::GlobalFuse,
        Component::LocalFuse,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Component::ImageAdapter => "A_f",
            Component::ClassTextAdapter => "A_cg",
            Component::SegTextAdapter => "A_sg",
            Component::Decoder => "decoder",
            Component::GlobalFuse => "global_fuse",
            Component::LocalFuse => "local_fuse",
            Component::Encoder => "encoder",
        }
    }

    fn owns(self, name: &str) -> bool {
        match self {
            Component::ImageAdapter => name.starts_with("image_adapter."),
            Component::ClassTextAdapter => name.starts_with("class_text_adapter."),
            Component::SegTextAdapter => name.starts_with("seg_text_adapter."),
            Component::Decoder => name.starts_with("decoder."),
            Component::GlobalFuse => name.starts_with("fusion.se_") || name.starts_with("fusion.global_fc"),
            Component::LocalFuse => name.starts_with("fusion.local"),
            Component::Encoder => false,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let c = match s {
            "A_f" | "image_adapter" => Component::ImageAdapter,
            "A_cg" | "class_text_adapter" => Component::ClassTextAdapter,
            "A_sg" | "seg_text_adapter" => Component::SegTextAdapter,
            "decoder" => Component::Decoder,
            "global_fuse" => Component::GlobalFuse,
            "local_fuse" => Component::LocalFuse,
            "encoder" => Component::Encoder,
            _ => return Err(Error::invalid(format!("unknown component `{s}`"))),
        };
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub component: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

/// The small model used for gradient checks: `D = C = 16`, a 4×4 patch grid,
/// and one transformer block in the decoder and in local fusion.
pub fn grad_check_config() -> ModelConfig {
    let mut config = ModelConfig::default();
    config.encoder.image_size = 64;
    config.encoder.feature_dim = 16;
    config.encoder.joint_dim = 16;
    config.decoder.blocks = 1;
    config.fusion.local_blocks = 1;
    config
}

struct Probe {
    vectors: Vec<Matrix>,
    tokens: Vec<Matrix>,
    stages: BTreeMap<usize, Matrix>,
}

impl Probe {
    fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let enc = &config.encoder;
        let (np, d, c) = (enc.num_patches(), enc.feature_dim, enc.joint_dim);
        let mut random = |r: usize, k: usize| Matrix::from_shape_fn((r, k), |_| rng.random_range(-1.0..1.0));
        let views = config.fusion.views;
        Self {
            vectors: (0..views).map(|_| random(1, c)).collect(),
            tokens: (0..views).map(|_| random(np, d)).collect(),
            stages: enc.stage_set.iter().map(|&l| (l, random(np, d))).collect(),
        }
    }
}

fn component_output(component: Component, model: &Clip3dModel, probe: &Probe, tape: &mut Tape) -> Result<Var> {
    let s = model.store();
    let leaves = |tape: &mut Tape, ms: &[Matrix]| -> Vec<Var> { ms.iter().map(|m| tape.leaf(m.clone())).collect() };
    let fusion = || {
        model
            .fusion()
            .ok_or_else(|| Error::invalid("model has no fusion module"))
    };
    Ok(match component {
        Component::ImageAdapter => {
            let x = tape.leaf(probe.vectors[0].clone());
            model.image_adapter().forward(tape, s, x)
        }
        Component::ClassTextAdapter => {
            let a = tape.leaf(probe.vectors[0].clone());
            let b = tape.leaf(probe.vectors[1].clone());
            let ya = model.class_adapter().forward(tape, s, a);
            let yb = model.class_adapter().forward(tape, s, b);
            tape.concat_rows(&[ya, yb])
        }
        Component::SegTextAdapter => {
            let a = tape.leaf(probe.vectors[0].clone());
            let b = tape.leaf(probe.vectors[1].clone());
            adapt_seg_text(tape, s, model.seg_adapter(), a, b)
        }
        Component::Decoder => {
            let stages = probe.stages.iter().map(|(l, m)| (*l, tape.leaf(m.clone()))).collect();
            model.decoder().forward(tape, s, &stages)?
        }
        Component::GlobalFuse => {
            let views = leaves(tape, &probe.vectors);
            fusion()?.global_fuse(tape, s, &views)?
        }
        Component::LocalFuse => {
            let views = leaves(tape, &probe.tokens);
            fusion()?.local_fuse(tape, s, &views)?
        }
        Component::Encoder => return Err(Error::NoTrainableParameters(component.id().into())),
    })
}

fn probe_loss(component: Component, model: &Clip3dModel, probe: &Probe, weights: &Matrix) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let out = component_output(component, model, probe, &mut tape)?;
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(out, w);
    let loss = tape.sum_all(prod);
    Ok((tape, loss))
}

/// Compares analytic gradients of `Σ out ⊙ R` (random probe inputs and
/// random `R`) against central differences with step `eps`, over every
/// parameter entry of the component. Relative error is measured per parameter
/// tensor as `max|a - n| / max(max|a|, max|n|)`, so entries whose gradient is
/// near zero are held to an absolute bound set by the tensor's scale rather
/// than to the roundoff of the difference quotient.
pub fn grad_check(component: Component, eps: f64, seed: u64) -> Result<GradCheckReport> {
    if component == Component::Encoder {
        return Err(Error::NoTrainableParameters(component.id().into()));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let model = Clip3dModel::new(grad_check_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = Probe::new(model.config(), &mut rng);
    let out_shape = {
        let mut tape = Tape::new();
        let out = component_output(component, &model, &probe, &mut tape)?;
        tape.shape(out)
    };
    let weights = Matrix::from_shape_fn(out_shape, |_| rng.random_range(-1.0..1.0));
    let (tape, loss) = probe_loss(component, &model, &probe, &weights)?;
    let analytic = tape.backward(loss).param_grads(model.store());
    let ids: Vec<_> = model
        .store()
        .ids()
        .filter(|id| component.owns(&model.store().get(*id).name))
        .collect();
    if ids.is_empty() {
        return Err(Error::NoTrainableParameters(component.id().into()));
    }
    let per_param = ids
        .par_iter()
        .map(|&id| -> Result<(f64, f64, usize)> {
            let grad = &analytic[id.index()];
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NumericDegeneracy(format!(
                    "non-finite analytic gradient for {}",
                    model.store().get(id).name
                )));
            }
            let mut local = model.clone();
            let (mut abs, mut scale) = (0.0f64, 0.0f64);
            let dim = grad.dim();
            for r in 0..dim.0 {
                for c in 0..dim.1 {
                    let orig = local.store().value(id)[[r, c]];
                    local.store_mut().value_mut(id)[[r, c]] = orig + eps;
                    let (t, l) = probe_loss(component, &local, &probe, &weights)?;
                    let up = t.scalar(l);
                    local.store_mut().value_mut(id)[[r, c]] = orig - eps;
                    let (t, l) = probe_loss(component, &local, &probe, &weights)?;
                    let down = t.scalar(l);
                    local.store_mut().value_mut(id)[[r, c]] = orig;
                    let numeric = (up - down) / (2.0 * eps);
                    let a = grad[[r, c]];
                    let diff = (a - numeric).abs();
                    abs = abs.max(diff);
                    scale = scale.max(a.abs()).max(numeric.abs());
                }
            }
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            Ok((rel, abs, dim.0 * dim.1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        component: component.id().into(),
        max_rel_error: per_param.iter().map(|p| p.0).fold(0.0, f64::max),
        max_abs_error: per_param.iter().map(|p| p.1).fold(0.0, f64::max),
        entries: per_param.iter().map(|p| p.2).sum(),
    })
}
