//! Low-rank high-order attention.
//!
//! The importance tensor for target `l` is a sum of `k` rank-1 outer products
//! of per-modality factor vectors. Contracting it against a slice of the
//! correlation tensor collapses to `1_dᵀ (I_l[:,r] ∘ B_l)` with
//! `B_l = Σ_j ∘_{i≠l} (I_i · w_j^{(i)})`, so the correlation tensor is never
//! materialised.

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, HocaError, Result};
use crate::rng::{uniform_vec, HocaRng};
use crate::tensor::{outer_rank1_capped, softmax_stable, AttentionWeights, DenseTensor, FeatureMatrix, DEFAULT_CAPACITY};

/// Rank-`k` factors of the importance tensor for one target modality.
///
/// `factors[i][j]` is the `j`-th factor for modality `i`, of length `t_i`.
/// The target slot `factors[target]` is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct RankFactors {
    target: usize,
    rank: usize,
    extents: Vec<usize>,
    factors: Vec<Vec<Vec<f64>>>,
}

impl RankFactors {
    pub fn new(target: usize, rank: usize, extents: &[usize], factors: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if rank == 0 {
            return Err(HocaError::Argument("rank must be at least 1".into()));
        }
        if target >= extents.len() {
            return Err(HocaError::Index(format!(
                "target {target} out of range for {} modalities",
                extents.len()
            )));
        }
        if factors.len() != extents.len() {
            return dim_err(format!(
                "{} factor groups for {} modalities",
                factors.len(),
                extents.len()
            ));
        }
        for (i, (group, &t)) in factors.iter().zip(extents).enumerate() {
            let expected = if i == target { 0 } else { rank };
            if group.len() != expected {
                return dim_err(format!("modality {i} has {} factors, expected {expected}", group.len()));
            }
            if let Some(bad) = group.iter().find(|f| f.len() != t) {
                return dim_err(format!("modality {i} factor has length {}, expected {t}", bad.len()));
            }
            if group.iter().flatten().any(|v| !v.is_finite()) {
                return Err(HocaError::Numeric(format!("non-finite factor for modality {i}")));
            }
        }
        Ok(Self {
            target,
            rank,
            extents: extents.to_vec(),
            factors,
        })
    }

    fn build(target: usize, rank: usize, extents: &[usize], mut fill: impl FnMut(usize) -> Vec<f64>) -> Result<Self> {
        let factors = extents
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                if i == target {
                    Vec::new()
                } else {
                    (0..rank).map(|_| fill(t)).collect()
                }
            })
            .collect();
        Self::new(target, rank, extents, factors)
    }

    /// All factors equal to `1`.
    pub fn ones(target: usize, rank: usize, extents: &[usize]) -> Result<Self> {
        Self::build(target, rank, extents, |t| vec![1.0; t])
    }

    /// All-ones plus uniform noise in `[−0.1, 0.1]`.
    pub fn init(rng: &mut HocaRng, target: usize, rank: usize, extents: &[usize]) -> Result<Self> {
        Self::build(target, rank, extents, |t| {
            uniform_vec(rng, t, -0.1, 0.1).into_iter().map(|e| 1.0 + e).collect()
        })
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn modalities(&self) -> usize {
        self.extents.len()
    }

    /// Factors of modality `i` (empty for the target).
    pub fn factors_of(&self, modality: usize) -> &[Vec<f64>] {
        &self.factors[modality]
    }

    pub fn factors_of_mut(&mut self, modality: usize) -> &mut [Vec<f64>] {
        &mut self.factors[modality]
    }

    /// Number of stored reals: `k · Σ_{i≠l} t_i`.
    pub fn stored_len(&self) -> usize {
        self.factors.iter().flatten().map(Vec::len).sum()
    }

    fn check_modalities(&self, modalities: &[FeatureMatrix]) -> Result<usize> {
        if modalities.len() != self.extents.len() {
            return dim_err(format!(
                "factors cover {} modalities, got {}",
                self.extents.len(),
                modalities.len()
            ));
        }
        let d = modalities[0].d();
        for (i, (m, &t)) in modalities.iter().zip(&self.extents).enumerate() {
            if m.d() != d {
                return dim_err(format!("all modalities must share d = {d}, modality {i} has {}", m.d()));
            }
            if m.t() != t {
                return dim_err(format!("modality {i} has t = {}, factors expect {t}", m.t()));
            }
        }
        Ok(d)
    }
}

/// Learned replacement for the all-ones contraction, one per target.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionVector(pub Vec<f64>);

/// How the target column and `B_l` are reduced to a score.
#[derive(Debug, Clone, PartialEq)]
pub enum Contraction {
    /// `1_d`, the exact identity with the dense path.
    Unit,
    Learned(ContractionVector),
}

/// `I · w`, the `w`-weighted sum of the columns of `I`.
pub fn global_info(features: &FeatureMatrix, w: &[f64]) -> Result<Vec<f64>> {
    features.mul_vec(w)
}

/// `B_l = Σ_j ∘_{i≠l} (I_i · w_j^{(i)})`. For a single modality this is the
/// empty product, the all-ones vector.
pub fn bl_vector(modalities: &[FeatureMatrix], factors: &RankFactors) -> Result<Vec<f64>> {
    let d = factors.check_modalities(modalities)?;
    if modalities.len() == 1 {
        return Ok(vec![1.0; d]);
    }
    let mut b = vec![0.0; d];
    for j in 0..factors.rank {
        let mut term: Option<Vec<f64>> = None;
        for (i, m) in modalities.iter().enumerate() {
            if i == factors.target {
                continue;
            }
            let g = global_info(m, &factors.factors[i][j])?;
            term = Some(match term {
                None => g,
                Some(acc) => acc.iter().zip(&g).map(|(a, b)| a * b).collect(),
            });
        }
        for (o, v) in b.iter_mut().zip(term.expect("at least one non-target modality")) {
            *o += v;
        }
    }
    Ok(b)
}

/// `score[r] = cᵀ (I_l[:,r] ∘ B_l)`, evaluated as `(c ∘ B_l)ᵀ I_l`.
pub fn lowrank_scores(modalities: &[FeatureMatrix], factors: &RankFactors, contraction: &Contraction) -> Result<Vec<f64>> {
    let b = bl_vector(modalities, factors)?;
    let target = &modalities[factors.target];
    let coeffs = match contraction {
        Contraction::Unit => b,
        Contraction::Learned(c) => {
            if c.0.len() != b.len() {
                return dim_err(format!("contraction has length {}, expected d = {}", c.0.len(), b.len()));
            }
            c.0.iter().zip(&b).map(|(c, b)| c * b).collect()
        }
    };
    crate::bahdanau::scores_from_common(target, &coeffs)
}

pub fn lowrank_weights(modalities: &[FeatureMatrix], factors: &RankFactors, contraction: &Contraction) -> Result<AttentionWeights> {
    softmax_stable(&lowrank_scores(modalities, factors, contraction)?)
}

/// `Σ_j ⊗_{i≠l} w_j^{(i)}` as a dense tensor over the non-target axes; an
/// order-0 `1.0` when there are no other modalities.
pub fn reconstruct_dense_weight(factors: &RankFactors) -> Result<DenseTensor> {
    reconstruct_dense_weight_capped(factors, DEFAULT_CAPACITY)
}

pub fn reconstruct_dense_weight_capped(factors: &RankFactors, cap: usize) -> Result<DenseTensor> {
    if factors.modalities() == 1 {
        return Ok(DenseTensor::scalar(1.0));
    }
    let mut total: Option<DenseTensor> = None;
    for j in 0..factors.rank {
        let parts: Vec<&[f64]> = factors
            .factors
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != factors.target)
            .map(|(_, group)| group[j].as_slice())
            .collect();
        let term = outer_rank1_capped(&parts, cap)?;
        match total.as_mut() {
            None => total = Some(term),
            Some(acc) => acc.add_assign(&term)?,
        }
    }
    Ok(total.expect("rank ≥ 1"))
}

/// Graph form of [`bl_vector`]. `factors[i][j]` are factor vectors for the
/// non-target modalities; the target slot is ignored. `d` is only used when
/// there is a single modality.
pub fn bl_vector_node(g: &mut Graph, feats: &[Var], factors: &[Vec<Var>], target: usize, d: usize) -> Result<Var> {
    if feats.len() != factors.len() {
        return dim_err(format!("{} feature nodes, {} factor groups", feats.len(), factors.len()));
    }
    if feats.len() == 1 {
        return g.vector(vec![1.0; d]);
    }
    let rank = factors
        .iter()
        .enumerate()
        .find(|(i, _)| *i != target)
        .map(|(_, f)| f.len())
        .unwrap_or(0);
    let mut terms = Vec::with_capacity(rank);
    for j in 0..rank {
        let mut term: Option<Var> = None;
        for (i, &f) in feats.iter().enumerate() {
            if i == target {
                continue;
            }
            let gi = g.matvec(f, factors[i][j])?;
            term = Some(match term {
                None => gi,
                Some(acc) => g.mul(acc, gi)?,
            });
        }
        terms.push(term.expect("non-target modality"));
    }
    g.add_all(&terms)
}

/// Graph form of [`lowrank_scores`]: `(c ∘ B)ᵀ I_l`, or `Bᵀ I_l` without a
/// contraction.
pub fn lowrank_scores_node(g: &mut Graph, target_feats: Var, b: Var, contraction: Option<Var>) -> Result<Var> {
    let coeffs = match contraction {
        Some(c) => g.mul(c, b)?,
        None => b,
    };
    g.vecmat(coeffs, target_feats)
}

/// Graph form of [`reconstruct_dense_weight`].
pub fn reconstruct_dense_weight_node(g: &mut Graph, factors: &[Vec<Var>], target: usize) -> Result<Var> {
    if factors.len() == 1 {
        return Ok(g.scalar(1.0));
    }
    let rank = factors
        .iter()
        .enumerate()
        .find(|(i, _)| *i != target)
        .map(|(_, f)| f.len())
        .unwrap_or(0);
    let mut terms = Vec::with_capacity(rank);
    for j in 0..rank {
        let parts: Vec<Var> = factors
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != target)
            .map(|(_, group)| group[j])
            .collect();
        terms.push(g.outer(&parts)?);
    }
    g.add_all(&terms)
}
