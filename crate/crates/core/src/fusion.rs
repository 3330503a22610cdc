//! Multi-view fusion: a squeeze-excite weighted global branch over the views'
//! [CLS] tokens and a transformer branch over their last-stage patch tokens.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BlockConfig, Init, Linear, ParamGroup, ParamStore, TransformerBlock};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub views: usize,
    pub se_reduction: usize,
    pub local_blocks: usize,
    #[serde(default)]
    pub block: BlockConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            views: 5,
            se_reduction: 2,
            local_blocks: 2,
            block: BlockConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiViewFusion {
    views: usize,
    se_squeeze: Linear,
    se_excite: Linear,
    global_fc: Linear,
    local_blocks: Vec<TransformerBlock>,
    local_proj: Linear,
}

impl MultiViewFusion {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        feature_dim: usize,
        joint_dim: usize,
        config: FusionConfig,
    ) -> Self {
        let g = ParamGroup::Fusion;
        let v = config.views;
        let hidden = (v / config.se_reduction.max(1)).max(1);
        Self {
            views: v,
            se_squeeze: Linear::new(store, "fusion.se_squeeze", g, init, v, hidden, 1.0),
            se_excite: Linear::new(store, "fusion.se_excite", g, init, hidden, v, 1.0),
            global_fc: Linear::new(store, "fusion.global_fc", g, init, v * joint_dim, joint_dim, 1.0),
            local_blocks: (0..config.local_blocks)
                .map(|i| {
                    TransformerBlock::new(
                        store,
                        &format!("fusion.local{i}"),
                        g,
                        init,
                        feature_dim,
                        config.block,
                        1.0,
                    )
                })
                .collect(),
            local_proj: Linear::new(store, "fusion.local_proj", g, init, feature_dim, joint_dim, 1.0),
        }
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn global_bias(&self) -> crate::nn::ParamId {
        self.global_fc.bias
    }

    fn stack_views(&self, tape: &mut Tape, views: &[Var], what: &str) -> Result<Var> {
        if views.len() != self.views {
            return Err(Error::invalid(format!(
                "{what} fusion expects {} views, got {}",
                self.views,
                views.len()
            )));
        }
        let shape = tape.shape(views[0]);
        if views.iter().any(|v| tape.shape(*v) != shape) {
            return Err(Error::invalid(format!("{what} fusion views differ in shape")));
        }
        Ok(tape.concat_rows(views))
    }

    /// Per-view gates in (0, 1): channel-mean of each [CLS], bottleneck MLP, sigmoid.
    /// Returned as a `views × 1` column.
    pub fn gates(&self, tape: &mut Tape, store: &ParamStore, cls_views: &[Var]) -> Result<Var> {
        let stacked = self.stack_views(tape, cls_views, "global")?;
        Ok(self.gates_of_stack(tape, store, stacked))
    }

    fn gates_of_stack(&self, tape: &mut Tape, store: &ParamStore, stacked: Var) -> Var {
        let squeezed = tape.row_mean(stacked);
        let squeezed = tape.transpose(squeezed);
        let h = self.se_squeeze.forward(tape, store, squeezed);
        let h = tape.gelu(h);
        let h = self.se_excite.forward(tape, store, h);
        let gates = tape.sigmoid(h);
        tape.transpose(gates)
    }

    /// Gate-scales each view's [CLS], concatenates them and maps back to `1×C`.
    pub fn global_fuse(&self, tape: &mut Tape, store: &ParamStore, cls_views: &[Var]) -> Result<Var> {
        let stacked = self.stack_views(tape, cls_views, "global")?;
        if tape.shape(stacked).0 != self.views {
            return Err(Error::invalid("global fusion expects one [CLS] row per view"));
        }
        let gates = self.gates_of_stack(tape, store, stacked);
        let weighted = tape.mul_col(stacked, gates);
        let cols = tape.shape(weighted).1;
        let flat = tape.reshape(weighted, 1, self.views * cols);
        Ok(self.global_fc.forward(tape, store, flat))
    }

    /// Stacks the views' patch tokens along the token axis, runs the blocks so
    /// attention can mix views, averages each token position across views and
    /// projects to `N_p×C`.
    pub fn local_fuse(&self, tape: &mut Tape, store: &ParamStore, feat_views: &[Var]) -> Result<Var> {
        let mut x = self.stack_views(tape, feat_views, "local")?;
        let n = tape.shape(feat_views[0]).0;
        for block in &self.local_blocks {
            x = block.forward(tape, store, x);
        }
        let mut pooled = tape.slice_rows(x, 0, n);
        for v in 1..self.views {
            let part = tape.slice_rows(x, v * n, n);
            pooled = tape.add(pooled, part);
        }
        let pooled = tape.scale(pooled, 1.0 / self.views as f64);
        Ok(self.local_proj.forward(tape, store, pooled))
    }

    /// Runs the local blocks and projection on a single view (no stacking).
    pub fn local_single_view(&self, tape: &mut Tape, store: &ParamStore, feat: Var) -> Var {
        let mut x = feat;
        for block in &self.local_blocks {
            x = block.forward(tape, store, x);
        }
        self.local_proj.forward(tape, store, x)
    }
}

/// Adds a fused enhancement term to adapted features.
pub fn enhance(adapted: &Matrix, fused: &Matrix) -> Result<Matrix> {
    if adapted.dim() != fused.dim() {
        return Err(Error::invalid(format!(
            "cannot enhance {:?} features with {:?} fused term",
            adapted.dim(),
            fused.dim()
        )));
    }
    Ok(adapted + fused)
}

pub fn enhance_var(tape: &mut Tape, adapted: Var, fused: Var) -> Result<Var> {
    if tape.shape(adapted) != tape.shape(fused) {
        return Err(Error::invalid("enhancement shapes differ"));
    }
    Ok(tape.add(adapted, fused))
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

    fn module() -> (ParamStore, MultiViewFusion) {
        let mut store = ParamStore::new();
        let mut init = Init::new(12);
        let f = MultiViewFusion::new(&mut store, &mut init, 16, 8, FusionConfig::default());
        (store, f)
    }

    #[test]
    fn global_shapes_gates_and_zero_input() {
        let (store, f) = module();
        let mut tape = Tape::new();
        let views: Vec<Var> = (0..5).map(|i| tape.leaf(random(1, 8, i))).collect();
        let out = f.global_fuse(&mut tape, &store, &views).unwrap();
        assert_eq!(tape.shape(out), (1, 8));
        let gates = f.gates(&mut tape, &store, &views).unwrap();
        assert_eq!(tape.shape(gates), (5, 1));
        assert!(tape.value(gates).iter().all(|g| *g > 0.0 && *g < 1.0));
        let first = tape.value(out).clone();

        let mut again = Tape::new();
        let views: Vec<Var> = (0..5).map(|i| again.leaf(random(1, 8, i))).collect();
        let out2 = f.global_fuse(&mut again, &store, &views).unwrap();
        assert_eq!(again.value(out2), &first);

        let mut zero = Tape::new();
        let views: Vec<Var> = (0..5).map(|_| zero.leaf(Matrix::zeros((1, 8)))).collect();
        let out = f.global_fuse(&mut zero, &store, &views).unwrap();
        assert_eq!(zero.value(out), store.value(f.global_bias()));
    }

    #[test]
    fn wrong_view_count() {
        let (store, f) = module();
        let mut tape = Tape::new();
        let views: Vec<Var> = (0..4).map(|i| tape.leaf(random(1, 8, i))).collect();
        assert!(f.global_fuse(&mut tape, &store, &views).is_err());
        let feats: Vec<Var> = (0..6).map(|i| tape.leaf(random(4, 16, i))).collect();
        assert!(f.local_fuse(&mut tape, &store, &feats).is_err());
        let mut mixed: Vec<Var> = (0..4).map(|i| tape.leaf(random(4, 16, i))).collect();
        mixed.push(tape.leaf(random(9, 16, 9)));
        assert!(f.local_fuse(&mut tape, &store, &mixed).is_err());
    }

    #[test]
    fn identical_views_match_single_view() {
        let (store, f) = module();
        let feat = random(9, 16, 42);
        let mut tape = Tape::new();
        let views: Vec<Var> = (0..5).map(|_| tape.leaf(feat.clone())).collect();
        let fused = f.local_fuse(&mut tape, &store, &views).unwrap();
        assert_eq!(tape.shape(fused), (9, 8));
        let single = tape.leaf(feat);
        let reference = f.local_single_view(&mut tape, &store, single);
        for (a, b) in tape.value(fused).iter().zip(tape.value(reference).iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn enhance_contract() {
        let a = random(3, 4, 1);
        let b = random(3, 4, 2);
        assert_eq!(enhance(&a, &Matrix::zeros((3, 4))).unwrap(), a);
        assert_eq!(enhance(&a, &b).unwrap(), enhance(&b, &a).unwrap());
        assert!(enhance(&a, &(-&a)).unwrap().iter().all(|v| *v == 0.0));
        assert!(enhance(&a, &random(4, 3, 3)).is_err());
    }
}
