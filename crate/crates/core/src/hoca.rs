//! Dense high-order cross-modal attention.
//!
//! Materialises the correlation tensor `C_n`, fixes the target axis at each
//! time step and contracts the remaining order-`(n−1)` slice with an
//! importance tensor before a softmax. This is the quadratic-or-worse
//! reference path that the low-rank module is checked against.

use crate::error::{dim_err, HocaError, Result};
use crate::lowrank::{reconstruct_dense_weight_capped, RankFactors};
use crate::tensor::{
    slice_fix_axis, softmax_stable, tensor_multiply_capped, weighted_sum, AttentionWeights, DenseTensor,
    FeatureMatrix, DEFAULT_CAPACITY,
};

/// Importance tensor for one target modality.
#[derive(Debug, Clone, PartialEq)]
pub enum ImportanceWeights {
    Dense(DenseTensor),
    /// Reconstructed densely on use.
    Factored(RankFactors),
}

impl ImportanceWeights {
    pub fn to_dense(&self, cap: usize) -> Result<DenseTensor> {
        match self {
            Self::Dense(w) => Ok(w.clone()),
            Self::Factored(f) => reconstruct_dense_weight_capped(f, cap),
        }
    }
}

/// One importance tensor per target modality.
#[derive(Debug, Clone, PartialEq)]
pub struct HocaParams {
    pub per_target: Vec<ImportanceWeights>,
}

/// Expected importance-tensor shape for `target`: the extents with the target
/// axis removed.
pub fn non_target_shape(extents: &[usize], target: usize) -> Vec<usize> {
    let mut shape = extents.to_vec();
    shape.remove(target);
    shape
}

/// `score[r] = Σ[W ∘ slice(C, target, r)]` on a precomputed correlation tensor.
pub fn scores_from_correlation(c: &DenseTensor, weight: &DenseTensor, target: usize) -> Result<Vec<f64>> {
    if target >= c.order() {
        return Err(HocaError::Index(format!("target {target} for order-{} tensor", c.order())));
    }
    let expected = non_target_shape(c.shape(), target);
    if weight.shape() != expected.as_slice() {
        return dim_err(format!(
            "importance tensor has shape {:?}, expected {expected:?}",
            weight.shape()
        ));
    }
    (0..c.shape()[target])
        .map(|r| weighted_sum(&slice_fix_axis(c, target, r)?, weight))
        .collect()
}

/// Pre-softmax scores of the target modality.
pub fn hoca_scores(modalities: &[FeatureMatrix], weight: &ImportanceWeights, target: usize) -> Result<Vec<f64>> {
    hoca_scores_capped(modalities, weight, target, DEFAULT_CAPACITY)
}

pub fn hoca_scores_capped(
    modalities: &[FeatureMatrix],
    weight: &ImportanceWeights,
    target: usize,
    cap: usize,
) -> Result<Vec<f64>> {
    if target >= modalities.len() {
        return Err(HocaError::Index(format!(
            "target {target} out of range for {} modalities",
            modalities.len()
        )));
    }
    let c = tensor_multiply_capped(modalities, cap)?;
    scores_from_correlation(&c, &weight.to_dense(cap)?, target)
}

pub fn hoca_weights(modalities: &[FeatureMatrix], params: &HocaParams, target: usize) -> Result<AttentionWeights> {
    let weight = params
        .per_target
        .get(target)
        .ok_or_else(|| HocaError::Index(format!("no importance tensor for target {target}")))?;
    softmax_stable(&hoca_scores(modalities, weight, target)?)
}

/// Weights for every target modality from a single correlation tensor.
pub fn hoca_all_weights(modalities: &[FeatureMatrix], params: &HocaParams) -> Result<Vec<AttentionWeights>> {
    hoca_all_weights_capped(modalities, params, DEFAULT_CAPACITY)
}

pub fn hoca_all_weights_capped(
    modalities: &[FeatureMatrix],
    params: &HocaParams,
    cap: usize,
) -> Result<Vec<AttentionWeights>> {
    if params.per_target.len() != modalities.len() {
        return dim_err(format!(
            "{} importance tensors for {} modalities",
            params.per_target.len(),
            modalities.len()
        ));
    }
    let c = tensor_multiply_capped(modalities, cap)?;
    params
        .per_target
        .iter()
        .enumerate()
        .map(|(l, w)| softmax_stable(&scores_from_correlation(&c, &w.to_dense(cap)?, l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::{lowrank_scores, Contraction};
    use crate::rng::{seeded, uniform_vec, HocaRng};
    use crate::tensor::tensor_multiply;

    fn random_modalities(rng: &mut HocaRng, d: usize, ts: &[usize]) -> Vec<FeatureMatrix> {
        ts.iter()
            .map(|&t| FeatureMatrix::new(d, t, uniform_vec(rng, d * t, -1.0, 1.0)).unwrap())
            .collect()
    }

    fn random_dense(rng: &mut HocaRng, shape: &[usize]) -> DenseTensor {
        let len = shape.iter().product();
        DenseTensor::new(shape.to_vec(), uniform_vec(rng, len, -1.0, 1.0)).unwrap()
    }

    #[test]
    fn worked_two_modality_case() {
        let i1 = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let i2 = FeatureMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let w = ImportanceWeights::Dense(DenseTensor::vector(vec![1.0, 2.0]).unwrap());
        let mods = [i1, i2];
        assert_eq!(hoca_scores(&mods, &w, 0).unwrap(), vec![3.0, 3.0]);
        let params = HocaParams {
            per_target: vec![w.clone(), w],
        };
        assert_eq!(hoca_weights(&mods, &params, 0).unwrap().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn ones_weight_matches_factored_sum() {
        let mut rng = seeded(1);
        let ts = [3, 2, 4];
        let mods = random_modalities(&mut rng, 3, &ts);
        for target in 0..3 {
            let shape = non_target_shape(&ts, target);
            let ones = ImportanceWeights::Dense(DenseTensor::filled(&shape, 1.0).unwrap());
            let scores = hoca_scores(&mods, &ones, target).unwrap();
            let others: Vec<Vec<f64>> = (0..3).filter(|&i| i != target).map(|i| mods[i].row_sums()).collect();
            for (r, s) in scores.iter().enumerate() {
                let expected: f64 = (0..3)
                    .map(|k| mods[target].get(k, r) * others.iter().map(|o| o[k]).product::<f64>())
                    .sum();
                assert!((s - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_modality_is_column_sum_softmax() {
        let m = FeatureMatrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.1, 0.2, 0.3]]).unwrap();
        let params = HocaParams {
            per_target: vec![ImportanceWeights::Dense(DenseTensor::scalar(1.0))],
        };
        let w = hoca_weights(std::slice::from_ref(&m), &params, 0).unwrap();
        let c = tensor_multiply(&[m]).unwrap();
        assert_eq!(w, softmax_stable(c.data()).unwrap());
    }

    #[test]
    fn single_step_target_gets_full_weight() {
        let mut rng = seeded(2);
        let mods = random_modalities(&mut rng, 2, &[1, 3]);
        let params = HocaParams {
            per_target: vec![
                ImportanceWeights::Dense(random_dense(&mut rng, &[3])),
                ImportanceWeights::Dense(random_dense(&mut rng, &[1])),
            ],
        };
        assert_eq!(hoca_weights(&mods, &params, 0).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn symmetric_pair_gives_equal_weights() {
        let mut rng = seeded(3);
        let m = random_modalities(&mut rng, 3, &[4]).remove(0);
        let w = ImportanceWeights::Dense(random_dense(&mut rng, &[4]));
        let params = HocaParams {
            per_target: vec![w.clone(), w],
        };
        let all = hoca_all_weights(&[m.clone(), m], &params).unwrap();
        assert_eq!(all[0], all[1]);
    }

    #[test]
    fn shared_correlation_matches_per_target_calls() {
        let mut rng = seeded(4);
        let ts = [3, 4, 2];
        let mods = random_modalities(&mut rng, 2, &ts);
        let params = HocaParams {
            per_target: (0..3)
                .map(|l| ImportanceWeights::Dense(random_dense(&mut rng, &non_target_shape(&ts, l))))
                .collect(),
        };
        let all = hoca_all_weights(&mods, &params).unwrap();
        for (l, w) in all.iter().enumerate() {
            assert_eq!(w, &hoca_weights(&mods, &params, l).unwrap());
        }
    }

    #[test]
    fn non_target_scaling_scales_scores() {
        let mut rng = seeded(5);
        let ts = [3, 2, 2];
        let mut mods = random_modalities(&mut rng, 3, &ts);
        let w = ImportanceWeights::Dense(random_dense(&mut rng, &non_target_shape(&ts, 0)));
        let before = hoca_scores(&mods, &w, 0).unwrap();
        mods[2] = mods[2].scaled(3.5);
        let after = hoca_scores(&mods, &w, 0).unwrap();
        for (a, b) in after.iter().zip(&before) {
            assert!((a - 3.5 * b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn target_permutation_permutes_weights() {
        let mut rng = seeded(6);
        let ts = [4, 3];
        let mods = random_modalities(&mut rng, 2, &ts);
        let params = HocaParams {
            per_target: vec![
                ImportanceWeights::Dense(random_dense(&mut rng, &[3])),
                ImportanceWeights::Dense(random_dense(&mut rng, &[4])),
            ],
        };
        let perm = [2, 0, 3, 1];
        let permuted = [mods[0].permute_columns(&perm).unwrap(), mods[1].clone()];
        let base = hoca_weights(&mods, &params, 0).unwrap();
        let moved = hoca_weights(&permuted, &params, 0).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert!((moved[k] - base[p]).abs() < 1e-15);
        }
    }

    #[test]
    fn factored_weights_match_lowrank_path() {
        let mut rng = seeded(7);
        let ts = [3, 5, 2];
        let mods = random_modalities(&mut rng, 4, &ts);
        for target in 0..3 {
            let f = RankFactors::init(&mut rng, target, 2, &ts).unwrap();
            let dense = hoca_scores(&mods, &ImportanceWeights::Factored(f.clone()), target).unwrap();
            let fast = lowrank_scores(&mods, &f, &Contraction::Unit).unwrap();
            for (a, b) in dense.iter().zip(&fast) {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0));
            }
        }
    }

    #[test]
    fn errors() {
        let mut rng = seeded(8);
        let mods = random_modalities(&mut rng, 2, &[20, 20, 20]);
        let w = ImportanceWeights::Dense(DenseTensor::filled(&[20, 20], 1.0).unwrap());
        assert!(matches!(
            hoca_scores_capped(&mods, &w, 0, 1000),
            Err(HocaError::Capacity { .. })
        ));
        let bad = ImportanceWeights::Dense(DenseTensor::filled(&[20], 1.0).unwrap());
        assert!(matches!(hoca_scores(&mods, &bad, 0), Err(HocaError::Dimension(_))));
        assert!(matches!(hoca_scores(&mods, &w, 3), Err(HocaError::Index(_))));
    }
}
