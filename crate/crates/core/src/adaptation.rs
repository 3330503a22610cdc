//! Trainable adapters, the coarse-to-fine decoder, and the patch/text
//! similarity that turns decoded features into an anomaly map.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{row_norms, softmax_rows, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BlockConfig, Init, Linear, ParamGroup, ParamStore, TransformerBlock};

/// Temperature applied to patch/text cosine similarities.
pub const GAMMA: f64 = 0.07;

/// Column of the similarity logits holding the anomalous text (second row of `T_s`).
pub const ANOMALY_COLUMN: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Bottleneck width is `C / reduction`.
    pub reduction: usize,
    /// Residual blend: `out = alpha * mlp(x) + (1 - alpha) * x`.
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            reduction: 4,
            alpha: 0.2,
        }
    }
}

/// Two-layer bottleneck MLP blended residually with its input.
#[derive(Debug, Clone)]
pub struct Adapter {
    fc1: Linear,
    fc2: Linear,
    alpha: f64,
}

impl Adapter {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        init: &mut Init,
        dim: usize,
        config: AdapterConfig,
    ) -> Self {
        let hidden = (dim / config.reduction.max(1)).max(1);
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), group, init, dim, hidden, 1.0),
            fc2: Linear::new(store, &format!("{name}.fc2"), group, init, hidden, dim, 1.0),
            alpha: config.alpha,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha;
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(tape, store, x);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h);
        let a = tape.scale(h, self.alpha);
        let b = tape.scale(x, 1.0 - self.alpha);
        tape.add(a, b)
    }

    /// Forward without keeping a tape around.
    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = self.forward(&mut tape, store, v);
        tape.value(y).clone()
    }

    pub fn output_bias(&self) -> crate::nn::ParamId {
        self.fc2.bias
    }

    pub fn weight_ids(&self) -> [crate::nn::ParamId; 4] {
        [self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias]
    }
}

/// Adapted segmentation text: row 0 is the normal prompt, row 1 the anomalous one.
pub fn adapt_seg_text(tape: &mut Tape, store: &ParamStore, adapter: &Adapter, t_plus: Var, t_minus: Var) -> Var {
    let a = adapter.forward(tape, store, t_plus);
    let b = adapter.forward(tape, store, t_minus);
    tape.concat_rows(&[a, b])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub blocks: usize,
    #[serde(default)]
    pub block: BlockConfig,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            block: BlockConfig::default(),
        }
    }
}

/// Projects each exported encoder stage to the joint width, concatenates them
/// along channels, mixes with transformer blocks and projects back to `C`.
#[derive(Debug, Clone)]
pub struct CoarseToFineDecoder {
    stage_proj: Vec<(usize, Linear)>,
    blocks: Vec<TransformerBlock>,
    out_proj: Linear,
}

impl CoarseToFineDecoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        stages: &[usize],
        feature_dim: usize,
        joint_dim: usize,
        config: DecoderConfig,
    ) -> Self {
        let g = ParamGroup::Decoder;
        let mut sorted = stages.to_vec();
        sorted.sort_unstable();
        let stage_proj: Vec<(usize, Linear)> = sorted
            .iter()
            .map(|&l| {
                (
                    l,
                    Linear::new(
                        store,
                        &format!("decoder.stage{l}"),
                        g,
                        init,
                        feature_dim,
                        joint_dim,
                        1.0,
                    ),
                )
            })
            .collect();
        let width = joint_dim * stage_proj.len();
        let blocks = (0..config.blocks)
            .map(|i| TransformerBlock::new(store, &format!("decoder.block{i}"), g, init, width, config.block, 1.0))
            .collect();
        let out_proj = Linear::new(store, "decoder.out", g, init, width, joint_dim, 1.0);
        Self {
            stage_proj,
            blocks,
            out_proj,
        }
    }

    pub fn stages(&self) -> impl Iterator<Item = usize> + '_ {
        self.stage_proj.iter().map(|(l, _)| *l)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, stages: &BTreeMap<usize, Var>) -> Result<Var> {
        let mut projected = Vec::with_capacity(self.stage_proj.len());
        let mut tokens = None;
        for (l, proj) in &self.stage_proj {
            let x = *stages
                .get(l)
                .ok_or_else(|| Error::invalid(format!("decoder input is missing stage {l}")))?;
            let (n, d) = tape.shape(x);
            if d != proj.in_dim(store) || tokens.is_some_and(|t| t != n) {
                return Err(Error::invalid(format!("stage {l} has shape {n}x{d}")));
            }
            tokens = Some(n);
            projected.push(proj.forward(tape, store, x));
        }
        let mut x = tape.concat_cols(&projected);
        for block in &self.blocks {
            x = block.forward(tape, store, x);
        }
        Ok(self.out_proj.forward(tape, store, x))
    }
}

fn check_nonzero_rows(m: &Matrix, what: &str) -> Result<()> {
    if let Some(i) = row_norms(m).iter().position(|n| !(*n > 0.0) || !n.is_finite()) {
        return Err(Error::NumericDegeneracy(format!(
            "{what} row {i} has zero or non-finite norm"
        )));
    }
    Ok(())
}

/// Cosine-similarity logits between patch features and the two text rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub logits: Matrix,
    pub gamma: f64,
}

/// Patch-level anomaly probability resampled to full resolution; values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub values: Matrix,
}

impl AnomalyMap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `(F / ‖F‖)(T_s / ‖T_s‖)ᵀ / γ`, normalising row by row.
pub fn similarity_map(features: &Matrix, text: &Matrix, gamma: f64) -> Result<SimilarityMap> {
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone());
    let t = tape.leaf(text.clone());
    let logits = similarity_logits(&mut tape, f, t, gamma)?;
    Ok(SimilarityMap {
        logits: tape.value(logits).clone(),
        gamma,
    })
}

pub fn similarity_logits(tape: &mut Tape, features: Var, text: Var, gamma: f64) -> Result<Var> {
    if tape.shape(features).1 != tape.shape(text).1 {
        return Err(Error::invalid("feature and text widths differ"));
    }
    check_nonzero_rows(tape.value(features), "feature")?;
    check_nonzero_rows(tape.value(text), "text")?;
    let f = tape.l2_normalize_rows(features);
    let t = tape.l2_normalize_rows(text);
    let tt = tape.transpose(t);
    let sim = tape.matmul(f, tt);
    Ok(tape.scale(sim, 1.0 / gamma))
}

/// Corner-aligned bilinear resampling weights: `out × src`.
pub fn bilinear_weights(src: usize, out: usize) -> Matrix {
    let mut w = Matrix::zeros((out, src));
    for i in 0..out {
        let pos = if out > 1 && src > 1 {
            i as f64 * (src - 1) as f64 / (out - 1) as f64
        } else {
            0.0
        };
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        w[[i, lo]] += 1.0 - frac;
        w[[i, hi]] += frac;
    }
    w
}

/// Bilinear upsampling of a square patch grid, as two constant matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Upsampler {
    pub side: usize,
    rows: Matrix,
    cols_t: Matrix,
}

impl Upsampler {
    pub fn new(side: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            side,
            rows: bilinear_weights(side, out_h),
            cols_t: bilinear_weights(side, out_w).reversed_axes(),
        }
    }

    pub fn output_dim(&self) -> (usize, usize) {
        (self.rows.nrows(), self.cols_t.ncols())
    }

    pub fn apply(&self, grid: &Matrix) -> Matrix {
        self.rows.dot(grid).dot(&self.cols_t)
    }

    pub fn forward(&self, tape: &mut Tape, grid: Var) -> Var {
        let r = tape.leaf(self.rows.clone());
        let c = tape.leaf(self.cols_t.clone());
        let x = tape.matmul(r, grid);
        tape.matmul(x, c)
    }
}

fn square_side(n: usize) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || n == 0 {
        return Err(Error::invalid(format!("{n} patch tokens do not form a square grid")));
    }
    Ok(side)
}

/// Softmax over each row of the logits, keep the anomaly column, lay it out on
/// the patch grid and resample bilinearly to `out_h`×`out_w`.
pub fn anomaly_map(sim: &SimilarityMap, out_h: usize, out_w: usize) -> Result<AnomalyMap> {
    let (n, k) = sim.logits.dim();
    if k != 2 {
        return Err(Error::invalid(format!("similarity map needs 2 columns, got {k}")));
    }
    let side = square_side(n)?;
    let probs = softmax_rows(&sim.logits);
    let grid = Matrix::from_shape_fn((side, side), |(r, c)| probs[[r * side + c, ANOMALY_COLUMN]]);
    let values = Upsampler::new(side, out_h, out_w)
        .apply(&grid)
        .mapv(|v| v.clamp(0.0, 1.0));
    Ok(AnomalyMap { values })
}

/// Differentiable counterpart of [`anomaly_map`].
pub fn anomaly_map_var(tape: &mut Tape, logits: Var, upsampler: &Upsampler) -> Result<Var> {
    let (n, _) = tape.shape(logits);
    let side = square_side(n)?;
    if side != upsampler.side {
        return Err(Error::invalid("upsampler grid does not match the patch count"));
    }
    let probs = tape.softmax_rows(logits);
    let col = tape.slice_cols(probs, ANOMALY_COLUMN, 1);
    let grid = tape.reshape(col, side, side);
    Ok(upsampler.forward(tape, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn adapter(alpha: f64) -> (ParamStore, Adapter) {
        let mut store = ParamStore::new();
        let mut init = Init::new(4);
        let a = Adapter::new(
            &mut store,
            "a",
            ParamGroup::ImageAdapter,
            &mut init,
            16,
            AdapterConfig { reduction: 4, alpha },
        );
        (store, a)
    }

    #[test]
    fn adapter_identity_and_bias() {
        let x = random(1, 16, 1);
        let (store, a) = adapter(0.0);
        assert_eq!(a.apply(&store, &x), x);

        let (mut store, a) = adapter(1.0);
        for id in a.weight_ids() {
            store.value_mut(id).fill(0.0);
        }
        let bias = Matrix::from_shape_fn((1, 16), |(_, c)| c as f64 * 0.1);
        store.value_mut(a.output_bias()).assign(&bias);
        assert_eq!(a.apply(&store, &x), bias);
    }

    #[test]
    fn adapter_forward_shape() {
        let (store, a) = adapter(0.2);
        let y = a.apply(&store, &random(1, 16, 2));
        assert_eq!(y.dim(), (1, 16));
        assert!(y.iter().all(|v| v.is_finite()));
        assert_ne!(y, a.apply(&store, &random(1, 16, 3)));
    }

    #[test]
    fn seg_text_rows() {
        let (store, a) = adapter(0.0);
        let (tp, tm) = (random(1, 16, 5), random(1, 16, 6));
        let mut tape = Tape::new();
        let (p, m) = (tape.leaf(tp.clone()), tape.leaf(tm.clone()));
        let ts = adapt_seg_text(&mut tape, &store, &a, p, m);
        let v = tape.value(ts);
        assert_eq!(v.dim(), (2, 16));
        assert_eq!(v.row(0), tp.row(0));
        assert_eq!(v.row(1), tm.row(0));
    }

    fn decoder(seed: u64) -> (ParamStore, CoarseToFineDecoder) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let d = CoarseToFineDecoder::new(&mut store, &mut init, &[6, 9, 12], 16, 16, DecoderConfig::default());
        (store, d)
    }

    #[test]
    fn decoder_shape_and_missing_stage() {
        let (store, dec) = decoder(1);
        let mut tape = Tape::new();
        let mut stages = BTreeMap::new();
        for (i, l) in [6, 9, 12].into_iter().enumerate() {
            stages.insert(l, tape.leaf(random(16, 16, 10 + i as u64)));
        }
        let out = dec.forward(&mut tape, &store, &stages).unwrap();
        assert_eq!(tape.shape(out), (16, 16));
        let first = tape.value(out).clone();
        let mut again = Tape::new();
        let stages2: BTreeMap<_, _> = [6, 9, 12]
            .into_iter()
            .enumerate()
            .map(|(i, l)| (l, again.leaf(random(16, 16, 10 + i as u64))))
            .collect();
        let out2 = dec.forward(&mut again, &store, &stages2).unwrap();
        assert_eq!(again.value(out2), &first);

        stages.remove(&9);
        assert!(matches!(
            dec.forward(&mut tape, &store, &stages),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn similarity_examples() {
        let text = Matrix::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let feats = Matrix::from_shape_vec((2, 3), vec![2.5, 0.0, 0.0, 0.0, 0.0, 4.0]).unwrap();
        let sim = similarity_map(&feats, &text, GAMMA).unwrap();
        assert_eq!(sim.logits.dim(), (2, 2));
        assert!((sim.logits[[0, 0]] - 1.0 / 0.07).abs() < 1e-12);
        assert!((sim.logits[[0, 0]] - 14.2857).abs() < 1e-4);
        assert_eq!(sim.logits[[0, 1]], 0.0);
        assert_eq!(sim.logits[[1, 0]], 0.0);
        assert_eq!(sim.logits[[1, 1]], 0.0);

        let zero = Matrix::zeros((1, 3));
        assert!(matches!(
            similarity_map(&zero, &text, GAMMA),
            Err(Error::NumericDegeneracy(_))
        ));
    }

    #[test]
    fn similarity_is_scale_invariant_per_row() {
        let f = random(9, 8, 1);
        let t = random(2, 8, 2);
        let mut scaled = f.clone();
        scaled.row_mut(3).mapv_inplace(|v| v * 17.5);
        let a = similarity_map(&f, &t, GAMMA).unwrap();
        let b = similarity_map(&scaled, &t, GAMMA).unwrap();
        for (x, y) in a.logits.iter().zip(b.logits.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn anomaly_map_examples() {
        let equal = SimilarityMap {
            logits: Matrix::from_elem((16, 2), 3.0),
            gamma: GAMMA,
        };
        let m = anomaly_map(&equal, 10, 12).unwrap();
        assert_eq!(m.values.dim(), (10, 12));
        assert!(m.values.iter().all(|v| (v - 0.5).abs() < 1e-15));

        let mut saturated = Matrix::zeros((4, 2));
        saturated.column_mut(1).fill(1e3);
        let m = anomaly_map(
            &SimilarityMap {
                logits: saturated,
                gamma: GAMMA,
            },
            5,
            5,
        )
        .unwrap();
        assert!(m.values.iter().all(|v| (v - 1.0).abs() < 1e-6));

        let bad = SimilarityMap {
            logits: Matrix::zeros((15, 2)),
            gamma: GAMMA,
        };
        assert!(anomaly_map(&bad, 4, 4).is_err());
    }

    #[test]
    fn bilinear_rows_sum_to_one_and_hit_corners() {
        let w = bilinear_weights(5, 17);
        for row in w.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(w[[0, 0]], 1.0);
        assert_eq!(w[[16, 4]], 1.0);
        let grid = random(5, 5, 9);
        let up = Upsampler::new(5, 17, 9).apply(&grid);
        assert_eq!(up[[0, 0]], grid[[0, 0]]);
        assert!((up[[16, 8]] - grid[[4, 4]]).abs() < 1e-12);
        let constant = Upsampler::new(5, 13, 7).apply(&Matrix::from_elem((5, 5), 0.3));
        assert!(constant.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn tape_and_plain_maps_agree() {
        let logits = random(25, 2, 4) * 10.0;
        let plain = anomaly_map(
            &SimilarityMap {
                logits: logits.clone(),
                gamma: GAMMA,
            },
            20,
            20,
        )
        .unwrap();
        let mut tape = Tape::new();
        let l = tape.leaf(logits);
        let v = anomaly_map_var(&mut tape, l, &Upsampler::new(5, 20, 20)).unwrap();
        for (a, b) in plain.values.iter().zip(tape.value(v).iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let probs = softmax_rows(tape.value(l));
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
}
