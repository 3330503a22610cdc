//! Image-level anomaly scores from adapted embeddings and the anomaly map.

use serde::{Deserialize, Serialize};

use crate::adaptation::AnomalyMap;
use crate::autodiff::{row_norms, Matrix};
use crate::error::{Error, Result};

/// Temperature of the test-time two-way softmax.
pub const TAU: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub s_plus: f64,
    pub s_minus: f64,
    pub a_score: f64,
}

/// Cosine similarity of two `1×C` rows; zero-norm inputs are rejected.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.dim() != b.dim() || a.nrows() != 1 {
        return Err(Error::invalid(format!(
            "cosine similarity needs two 1xC rows, got {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let na = row_norms(a)[0];
    let nb = row_norms(b)[0];
    if na == 0.0 || nb == 0.0 {
        return Err(Error::NumericDegeneracy("zero-norm embedding".into()));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `(S⁺, S⁻)` from the normal and anomalous logits.
pub fn two_way_softmax(logit_plus: f64, logit_minus: f64) -> (f64, f64) {
    // the larger logit is factored out
    let m = logit_plus.max(logit_minus);
    let (ep, em) = ((logit_plus - m).exp(), (logit_minus - m).exp());
    (ep / (ep + em), em / (ep + em))
}

/// `S⁺`/`S⁻` as a τ-softmax over the similarities to the two class texts,
/// and `A = S⁻ / (S⁻ + S⁺) + max S_map`.
pub fn classification_score_with(
    i_a: &Matrix,
    t_c_plus: &Matrix,
    t_c_minus: &Matrix,
    map_max: f64,
    tau: f64,
) -> Result<ScorePair> {
    let (s_plus, s_minus) = two_way_softmax(
        cosine_similarity(i_a, t_c_plus)? / tau,
        cosine_similarity(i_a, t_c_minus)? / tau,
    );
    Ok(ScorePair {
        s_plus,
        s_minus,
        a_score: s_minus / (s_minus + s_plus) + map_max,
    })
}

pub fn classification_score(
    i_a: &Matrix,
    t_c_plus: &Matrix,
    t_c_minus: &Matrix,
    s_map: &AnomalyMap,
) -> Result<ScorePair> {
    classification_score_with(i_a, t_c_plus, t_c_minus, s_map.max(), TAU)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn map(v: f64) -> AnomalyMap {
        AnomalyMap {
            values: Matrix::from_elem((2, 2), v),
        }
    }

    #[test]
    fn equal_similarities_give_half() {
        let i = array![[1.0, 0.0]];
        let t = array![[0.0, 1.0]];
        let s = classification_score(&i, &t, &t, &map(0.25)).unwrap();
        assert_eq!(s.s_plus, 0.5);
        assert_eq!(s.s_minus, 0.5);
        assert_eq!(s.a_score, 0.75);
    }

    #[test]
    fn gap_of_tau() {
        // cos to T⁻ is 1, cos to T⁺ is 1 - 0.07
        let i = array![[1.0, 0.0]];
        let c: f64 = 1.0 - TAU;
        let t_plus = array![[c, (1.0 - c * c).sqrt()]];
        let t_minus = array![[1.0, 0.0]];
        let s = classification_score(&i, &t_plus, &t_minus, &map(0.0)).unwrap();
        let e = std::f64::consts::E;
        assert!((s.s_minus - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_rejected() {
        let z = Matrix::zeros((1, 3));
        let t = array![[1.0, 0.0, 0.0]];
        assert!(matches!(
            classification_score(&z, &t, &t, &map(0.0)),
            Err(Error::NumericDegeneracy(_))
        ));
    }
}
