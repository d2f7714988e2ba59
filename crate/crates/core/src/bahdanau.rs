//! Additive (Bahdanau) attention: query-conditioned projection into the
//! common space, per-column scores, softmax weights and context vectors.
//!
//! The projection `tanh(W·h + U·I[:,r] + b)` is also the front end of the
//! high-order mechanisms, which take its output as their common-space
//! features.

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Result};
use crate::rng::{xavier_uniform, HocaRng};
use crate::tensor::{softmax_stable, AttentionWeights, DenseTensor, FeatureMatrix};

/// Decoder hidden state used as the attention query.
#[derive(Debug, Clone, PartialEq)]
pub struct Query(pub Vec<f64>);

impl Query {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-modality projection: `w_query` is `a × h`, `u_feat` is `a × d_l`,
/// `bias` and `score` have length `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub w_query: DenseTensor,
    pub u_feat: DenseTensor,
    pub bias: Vec<f64>,
    pub score: Vec<f64>,
}

impl ProjectionParams {
    pub fn zeros(attention: usize, hidden: usize, feat: usize) -> Self {
        Self {
            w_query: DenseTensor::zeros(&[attention, hidden]).expect("positive dims"),
            u_feat: DenseTensor::zeros(&[attention, feat]).expect("positive dims"),
            bias: vec![0.0; attention],
            score: vec![0.0; attention],
        }
    }

    /// Xavier-uniform matrices and score vector, zero bias.
    pub fn init(rng: &mut HocaRng, attention: usize, hidden: usize, feat: usize) -> Self {
        let w_query = xavier_uniform(rng, hidden, attention, attention * hidden);
        let u_feat = xavier_uniform(rng, feat, attention, attention * feat);
        let score = xavier_uniform(rng, attention, 1, attention);
        Self {
            w_query: DenseTensor::matrix(attention, hidden, w_query).expect("sized"),
            u_feat: DenseTensor::matrix(attention, feat, u_feat).expect("sized"),
            bias: vec![0.0; attention],
            score,
        }
    }

    pub fn attention_dim(&self) -> usize {
        self.bias.len()
    }

    fn check(&self, query: Option<&Query>, feats: &FeatureMatrix) -> Result<()> {
        let a = self.bias.len();
        let [wa, wh] = *self.w_query.shape() else {
            return dim_err("w_query must be a matrix");
        };
        let [ua, ud] = *self.u_feat.shape() else {
            return dim_err("u_feat must be a matrix");
        };
        if wa != a || ua != a || self.score.len() != a {
            return dim_err(format!(
                "attention size mismatch: bias {a}, w_query {wa}, u_feat {ua}, score {}",
                self.score.len()
            ));
        }
        if ud != feats.d() {
            return dim_err(format!("u_feat expects d = {ud}, features have d = {}", feats.d()));
        }
        if let Some(q) = query {
            if q.len() != wh {
                return dim_err(format!("w_query expects h = {wh}, query has {}", q.len()));
            }
        }
        Ok(())
    }
}

fn matvec(m: &DenseTensor, v: &[f64]) -> Vec<f64> {
    let cols = m.shape()[1];
    m.data()
        .chunks(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn project(offset: &[f64], feats: &FeatureMatrix, params: &ProjectionParams) -> Result<FeatureMatrix> {
    let a = params.attention_dim();
    let columns: Vec<Vec<f64>> = feats
        .columns()
        .iter()
        .map(|col| {
            matvec(&params.u_feat, col)
                .into_iter()
                .zip(offset)
                .map(|(u, q)| (u + q).tanh())
                .collect()
        })
        .collect();
    debug_assert!(columns.iter().all(|c| c.len() == a));
    FeatureMatrix::from_columns(&columns)
}

/// Column `r` of the result is `tanh(W·h + U·I[:,r] + b)`.
pub fn project_common(query: &Query, feats: &FeatureMatrix, params: &ProjectionParams) -> Result<FeatureMatrix> {
    params.check(Some(query), feats)?;
    let offset: Vec<f64> = matvec(&params.w_query, &query.0)
        .into_iter()
        .zip(&params.bias)
        .map(|(w, b)| w + b)
        .collect();
    project(&offset, feats, params)
}

/// Query-free ablation: column `r` is `tanh(U·I[:,r] + b)`.
pub fn project_common_query_free(feats: &FeatureMatrix, params: &ProjectionParams) -> Result<FeatureMatrix> {
    params.check(None, feats)?;
    project(&params.bias, feats, params)
}

/// `score[r] = wᵀ tanh(W·h + U·I[:,r] + b)`.
pub fn unary_scores(query: &Query, feats: &FeatureMatrix, params: &ProjectionParams) -> Result<Vec<f64>> {
    let common = project_common(query, feats, params)?;
    scores_from_common(&common, &params.score)
}

/// `wᵀ P` for common-space features `P`.
pub fn scores_from_common(common: &FeatureMatrix, score: &[f64]) -> Result<Vec<f64>> {
    if score.len() != common.d() {
        return dim_err(format!(
            "score vector has length {}, features have d = {}",
            score.len(),
            common.d()
        ));
    }
    let t = common.t();
    let mut out = vec![0.0; t];
    for (row, &w) in common.values().chunks(t).zip(score) {
        for (o, &p) in out.iter_mut().zip(row) {
            *o += w * p;
        }
    }
    Ok(out)
}

pub fn unary_weights(scores: &[f64]) -> Result<AttentionWeights> {
    softmax_stable(scores)
}

/// `Σ_r α[r] · I[:,r]`.
pub fn context_vector(weights: &[f64], feats: &FeatureMatrix) -> Result<Vec<f64>> {
    if weights.len() != feats.t() {
        return dim_err(format!(
            "{} weights for {} time steps",
            weights.len(),
            feats.t()
        ));
    }
    feats.mul_vec(weights)
}

/// Graph handles for one modality's projection parameters.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionVars {
    pub w_query: Var,
    pub u_feat: Var,
    pub bias: Var,
    pub score: Var,
}

/// `U · I`, the query-independent half of the projection. Computed once per
/// item and reused at every decoder step.
pub fn project_features_node(g: &mut Graph, feats: Var, vars: &ProjectionVars) -> Result<Var> {
    g.matmul(vars.u_feat, feats)
}

/// `tanh(U·I ⊕ (W·h + b))` given the precomputed `U·I`; `query = None` is the
/// query-free ablation.
pub fn project_common_node(g: &mut Graph, projected: Var, query: Option<Var>, vars: &ProjectionVars) -> Result<Var> {
    let offset = match query {
        Some(h) => {
            let wh = g.matvec(vars.w_query, h)?;
            g.add(wh, vars.bias)?
        }
        None => vars.bias,
    };
    let pre = g.add_column(projected, offset)?;
    g.tanh(pre)
}

pub fn unary_scores_node(g: &mut Graph, common: Var, vars: &ProjectionVars) -> Result<Var> {
    g.vecmat(vars.score, common)
}

pub fn context_vector_node(g: &mut Graph, feats: Var, weights: Var) -> Result<Var> {
    g.matvec(feats, weights)
}
