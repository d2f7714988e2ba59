//! Multiple attentive fusion.
//!
//! For every target modality, attention weights are computed from each
//! enabled family of modality subsets that contain it (the target alone,
//! each pair, the triple), combined through trainable per-family scalars,
//! and turned into context vectors. A second additive attention weighs the
//! modalities' contexts before the word distribution is produced.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::bahdanau::{
    project_common, project_common_node, project_common_query_free, project_features_node, scores_from_common,
    ProjectionParams, ProjectionVars, Query,
};
use crate::error::{dim_err, HocaError, Result};
use crate::hoca::{hoca_scores_capped, non_target_shape, ImportanceWeights};
use crate::lowrank::{
    bl_vector_node, lowrank_scores, lowrank_scores_node, reconstruct_dense_weight, reconstruct_dense_weight_node,
    Contraction, ContractionVector, RankFactors,
};
use crate::rng::{xavier_uniform, HocaRng};
use crate::tensor::{softmax_stable, AttentionWeights, DenseTensor, FeatureMatrix, DEFAULT_CAPACITY};

/// Scoring mechanism used for the multi-modality families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Unary,
    Hoca,
    Lowrank,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Unary => "unary",
            Self::Hoca => "hoca",
            Self::Lowrank => "lowrank",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = HocaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unary" => Ok(Self::Unary),
            "hoca" => Ok(Self::Hoca),
            "lowrank" => Ok(Self::Lowrank),
            other => Err(HocaError::Config(format!(
                "mechanism must be unary, hoca or lowrank, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Enabled family sizes, a non-empty subset of `{1, 2, 3}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ArityConfig(Vec<usize>);

impl ArityConfig {
    pub fn new(arities: &[usize]) -> Result<Self> {
        let mut a = arities.to_vec();
        a.sort_unstable();
        a.dedup();
        if a.is_empty() {
            return Err(HocaError::Config("arities: at least one arity must be enabled".into()));
        }
        if let Some(bad) = a.iter().find(|&&x| !(1..=3).contains(&x)) {
            return Err(HocaError::Config(format!("arities: {bad} is not one of 1, 2, 3")));
        }
        Ok(Self(a))
    }

    pub fn unary() -> Self {
        Self(vec![1])
    }

    pub fn all() -> Self {
        Self(vec![1, 2, 3])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    pub fn contains(&self, arity: usize) -> bool {
        self.0.contains(&arity)
    }
}

impl TryFrom<Vec<usize>> for ArityConfig {
    type Error = HocaError;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<ArityConfig> for Vec<usize> {
    fn from(a: ArityConfig) -> Self {
        a.0
    }
}

impl std::str::FromStr for ArityConfig {
    type Err = HocaError;

    fn from_str(s: &str) -> Result<Self> {
        let parsed = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| HocaError::Config(format!("arities: cannot parse {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(&parsed)
    }
}

/// Fusion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MafConfig {
    pub mechanism: Mechanism,
    pub arities: ArityConfig,
    pub rank: usize,
    /// Drop the query term from the common-space projection.
    #[serde(default)]
    pub query_free: bool,
    /// Train a dense importance tensor instead of rank factors (hoca only).
    #[serde(default)]
    pub dense_importance: bool,
}

impl Default for MafConfig {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::Lowrank,
            arities: ArityConfig::all(),
            rank: 1,
            query_free: false,
            dense_importance: false,
        }
    }
}

impl MafConfig {
    pub fn validate(&self, modalities: usize) -> Result<()> {
        if self.mechanism == Mechanism::Unary && self.arities.as_slice() != [1] {
            return Err(HocaError::Config(format!(
                "arities: mechanism unary only supports arity 1, got {:?}",
                self.arities.as_slice()
            )));
        }
        if self.arities.max() > modalities {
            return Err(HocaError::Config(format!(
                "arities: arity {} needs at least that many modalities, have {modalities}",
                self.arities.max()
            )));
        }
        if !(1..=16).contains(&self.rank) {
            return Err(HocaError::Config(format!("rank: must be in 1..=16, got {}", self.rank)));
        }
        if self.dense_importance && self.mechanism != Mechanism::Hoca {
            return Err(HocaError::Config("dense_importance: only valid with mechanism hoca".into()));
        }
        Ok(())
    }
}

/// Subsets of `0..n` that contain `target`, restricted to the enabled sizes,
/// ordered by size and then lexicographically.
pub fn families(n: usize, target: usize, arities: &ArityConfig) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for &size in arities.as_slice() {
        if size > n {
            continue;
        }
        let others: Vec<usize> = (0..n).filter(|&i| i != target).collect();
        for combo in combinations(&others, size - 1) {
            let mut members = combo;
            members.push(target);
            members.sort_unstable();
            out.push(members);
        }
    }
    out
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (i, &first) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Shapes shared by the fusion parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MafDims {
    /// Time steps per modality.
    pub extents: Vec<usize>,
    /// Row count of the encoded features (shared by all modalities).
    pub context: usize,
    pub hidden: usize,
    /// Common-space dimension `d`.
    pub common: usize,
    /// Hidden size of the modality-level attention.
    pub fusion_attention: usize,
    pub vocab: usize,
}

/// Modality-level attention and the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalParams {
    pub w_e: DenseTensor,
    pub u_e: DenseTensor,
    pub b_e: Vec<f64>,
    pub score_e: Vec<f64>,
    pub w_ph: DenseTensor,
    pub w_pk: Vec<DenseTensor>,
    pub b_p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FamilyParams {
    /// Additive attention on the target alone.
    Unary,
    Hoca(ImportanceWeights),
    Lowrank { factors: RankFactors, contraction: Contraction },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Family {
    /// Modality indices, ascending.
    pub members: Vec<usize>,
    pub params: FamilyParams,
}

/// Plain-value snapshot of every fusion parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MafParams {
    pub query_free: bool,
    pub projections: Vec<ProjectionParams>,
    pub families: Vec<Vec<Family>>,
    pub thetas: Vec<Vec<f64>>,
    pub hier: HierarchicalParams,
}

fn matvec(m: &DenseTensor, v: &[f64]) -> Result<Vec<f64>> {
    let [rows, cols] = *m.shape() else {
        return dim_err("expected a matrix");
    };
    if cols != v.len() {
        return dim_err(format!("matrix has {cols} columns, vector has {}", v.len()));
    }
    let out: Vec<f64> = m
        .data()
        .chunks(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect();
    debug_assert_eq!(out.len(), rows);
    Ok(out)
}

/// Family weights for every target modality, in [`families`] order.
pub fn arity_weights(query: &Query, encoded: &[FeatureMatrix], params: &MafParams) -> Result<Vec<Vec<AttentionWeights>>> {
    if encoded.len() != params.projections.len() {
        return dim_err(format!(
            "{} modalities for {} projections",
            encoded.len(),
            params.projections.len()
        ));
    }
    let common = encoded
        .iter()
        .zip(&params.projections)
        .map(|(e, p)| {
            if params.query_free {
                project_common_query_free(e, p)
            } else {
                project_common(query, e, p)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    family_weights_from_common(&common, params)
}

/// As [`arity_weights`], starting from common-space features.
pub fn family_weights_from_common(common: &[FeatureMatrix], params: &MafParams) -> Result<Vec<Vec<AttentionWeights>>> {
    params
        .families
        .iter()
        .enumerate()
        .map(|(l, fams)| {
            fams.iter()
                .map(|fam| {
                    let subset: Vec<FeatureMatrix> = fam.members.iter().map(|&i| common[i].clone()).collect();
                    let pos = fam
                        .members
                        .iter()
                        .position(|&i| i == l)
                        .ok_or_else(|| HocaError::Config(format!("family {:?} lacks target {l}", fam.members)))?;
                    let scores = match &fam.params {
                        FamilyParams::Unary => scores_from_common(&common[l], &params.projections[l].score)?,
                        FamilyParams::Hoca(w) => hoca_scores_capped(&subset, w, pos, DEFAULT_CAPACITY)?,
                        FamilyParams::Lowrank { factors, contraction } => {
                            lowrank_scores(&subset, factors, contraction)?
                        }
                    };
                    softmax_stable(&scores)
                })
                .collect()
        })
        .collect()
}

/// `softmax_time(Σ_f θ_f α_f)`.
pub fn combine_weights(families: &[AttentionWeights], thetas: &[f64]) -> Result<AttentionWeights> {
    softmax_stable(&combined_scores(families, thetas)?)
}

/// The pre-softmax vector of [`combine_weights`].
pub fn combined_scores(families: &[AttentionWeights], thetas: &[f64]) -> Result<Vec<f64>> {
    let first = families
        .first()
        .ok_or_else(|| HocaError::Argument("no weight families to combine".into()))?;
    if families.len() != thetas.len() {
        return dim_err(format!("{} families, {} thetas", families.len(), thetas.len()));
    }
    let mut acc = vec![0.0; first.len()];
    for (fam, &theta) in families.iter().zip(thetas) {
        if fam.len() != acc.len() {
            return dim_err(format!("family lengths {} and {} differ", fam.len(), acc.len()));
        }
        for (a, &w) in acc.iter_mut().zip(fam.iter()) {
            *a += theta * w;
        }
    }
    Ok(acc)
}

/// `β = softmax_k(w_eᵀ tanh(W_e h + U_e φ_k + b_e))`.
pub fn hierarchical_modality_weights(query: &Query, contexts: &[Vec<f64>], hier: &HierarchicalParams) -> Result<AttentionWeights> {
    let wh = matvec(&hier.w_e, &query.0)?;
    let scores = contexts
        .iter()
        .map(|phi| {
            let u = matvec(&hier.u_e, phi)?;
            if u.len() != wh.len() || hier.b_e.len() != wh.len() || hier.score_e.len() != wh.len() {
                return dim_err("modality attention parameters disagree in size");
            }
            Ok(u.iter()
                .zip(&wh)
                .zip(&hier.b_e)
                .zip(&hier.score_e)
                .map(|(((u, w), b), s)| s * (u + (w + b)).tanh())
                .sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    softmax_stable(&scores)
}

/// Word logits `W_ph h + Σ_k β_k W_pk φ_k + b_p` and their softmax.
pub fn fused_logits(
    query: &Query,
    contexts: &[Vec<f64>],
    beta: &[f64],
    hier: &HierarchicalParams,
) -> Result<(Vec<f64>, AttentionWeights)> {
    if contexts.len() != beta.len() || contexts.len() != hier.w_pk.len() {
        return dim_err(format!(
            "{} contexts, {} modality weights, {} output maps",
            contexts.len(),
            beta.len(),
            hier.w_pk.len()
        ));
    }
    if hier.b_p.len() < 2 {
        return Err(HocaError::Argument("vocabulary needs at least two words".into()));
    }
    let mut logits = matvec(&hier.w_ph, &query.0)?;
    for ((phi, &b), w) in contexts.iter().zip(beta).zip(&hier.w_pk) {
        let d = matvec(w, phi)?;
        if d.len() != logits.len() {
            return dim_err("output maps disagree on vocabulary size");
        }
        for (l, v) in logits.iter_mut().zip(d) {
            *l += b * v;
        }
    }
    if hier.b_p.len() != logits.len() {
        return dim_err("output bias disagrees on vocabulary size");
    }
    for (l, b) in logits.iter_mut().zip(&hier.b_p) {
        *l += b;
    }
    let probs = softmax_stable(&logits)?;
    Ok((logits, probs))
}

/// Everything one fusion step produces.
#[derive(Debug, Clone, PartialEq)]
pub struct MafOutput {
    pub families: Vec<Vec<AttentionWeights>>,
    pub combined: Vec<AttentionWeights>,
    pub contexts: Vec<Vec<f64>>,
    pub beta: AttentionWeights,
    pub logits: Vec<f64>,
    pub probs: AttentionWeights,
}

/// One full fusion step on plain values.
pub fn maf_step(query: &Query, encoded: &[FeatureMatrix], params: &MafParams) -> Result<MafOutput> {
    let families = arity_weights(query, encoded, params)?;
    let combined = families
        .iter()
        .zip(&params.thetas)
        .map(|(f, th)| combine_weights(f, th))
        .collect::<Result<Vec<_>>>()?;
    let contexts = combined
        .iter()
        .zip(encoded)
        .map(|(a, e)| e.mul_vec(a))
        .collect::<Result<Vec<_>>>()?;
    let beta = hierarchical_modality_weights(query, &contexts, &params.hier)?;
    let (logits, probs) = fused_logits(query, &contexts, &beta, &params.hier)?;
    Ok(MafOutput {
        families,
        combined,
        contexts,
        beta,
        logits,
        probs,
    })
}

#[derive(Debug, Clone)]
pub struct ProjectionIds {
    pub w_query: ParamId,
    pub u_feat: ParamId,
    pub bias: ParamId,
    pub score: ParamId,
}

#[derive(Debug, Clone)]
pub enum FamilyIds {
    Unary,
    /// `factors[pos][j]`, empty at the target position.
    Factored {
        factors: Vec<Vec<ParamId>>,
        contraction: Option<ParamId>,
    },
    Dense(ParamId),
}

#[derive(Debug, Clone)]
pub struct FamilyLayout {
    pub members: Vec<usize>,
    /// Position of the target within `members`.
    pub target_pos: usize,
    pub ids: FamilyIds,
}

#[derive(Debug, Clone)]
pub struct HierIds {
    pub w_e: ParamId,
    pub u_e: ParamId,
    pub b_e: ParamId,
    pub score_e: ParamId,
    pub w_ph: ParamId,
    pub w_pk: Vec<ParamId>,
    pub b_p: ParamId,
}

/// Where each fusion parameter lives in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct MafLayout {
    pub config: MafConfig,
    pub dims: MafDims,
    pub projections: Vec<ProjectionIds>,
    pub families: Vec<Vec<FamilyLayout>>,
    pub thetas: Vec<Vec<ParamId>>,
    pub hier: HierIds,
}

fn add_matrix(store: &mut ParamStore, rng: &mut HocaRng, name: String, rows: usize, cols: usize) -> Result<ParamId> {
    let values = xavier_uniform(rng, cols, rows, rows * cols);
    store.add(name, DenseTensor::matrix(rows, cols, values)?, true)
}

fn add_vector(store: &mut ParamStore, name: String, values: Vec<f64>) -> Result<ParamId> {
    store.add(name, DenseTensor::vector(values)?, true)
}

fn family_key(l: usize, members: &[usize]) -> String {
    let m: Vec<String> = members.iter().map(usize::to_string).collect();
    format!("fam.{l}.{}", m.join("-"))
}

impl MafLayout {
    /// Registers freshly initialised fusion parameters under the `proj.`,
    /// `fam.`, `theta.`, `hier.` and `out.` prefixes.
    pub fn register(store: &mut ParamStore, rng: &mut HocaRng, config: &MafConfig, dims: &MafDims) -> Result<Self> {
        let n = dims.extents.len();
        config.validate(n)?;
        if dims.vocab < 2 {
            return Err(HocaError::Config("vocab: need at least two words".into()));
        }
        let mut projections = Vec::with_capacity(n);
        for m in 0..n {
            let p = ProjectionParams::init(rng, dims.common, dims.hidden, dims.context);
            projections.push(ProjectionIds {
                w_query: store.add(format!("proj.{m}.w_query"), p.w_query, true)?,
                u_feat: store.add(format!("proj.{m}.u_feat"), p.u_feat, true)?,
                bias: add_vector(store, format!("proj.{m}.bias"), p.bias)?,
                score: add_vector(store, format!("proj.{m}.score"), p.score)?,
            });
        }
        let mut families_out = Vec::with_capacity(n);
        let mut thetas = Vec::with_capacity(n);
        for l in 0..n {
            let mut fams = Vec::new();
            let mut th = Vec::new();
            for (f, members) in families(n, l, &config.arities).into_iter().enumerate() {
                let key = family_key(l, &members);
                let target_pos = members.iter().position(|&i| i == l).expect("contains target");
                let ids = if members.len() == 1 {
                    FamilyIds::Unary
                } else {
                    let extents: Vec<usize> = members.iter().map(|&i| dims.extents[i]).collect();
                    let init = RankFactors::init(rng, target_pos, config.rank, &extents)?;
                    if config.dense_importance {
                        let w = reconstruct_dense_weight(&init)?;
                        FamilyIds::Dense(store.add(format!("{key}.dense"), w, true)?)
                    } else {
                        let mut factors = Vec::with_capacity(members.len());
                        for (pos, _) in members.iter().enumerate() {
                            let ids = init
                                .factors_of(pos)
                                .iter()
                                .enumerate()
                                .map(|(j, v)| add_vector(store, format!("{key}.factor.{pos}.{j}"), v.clone()))
                                .collect::<Result<Vec<_>>>()?;
                            factors.push(ids);
                        }
                        let contraction = match config.mechanism {
                            Mechanism::Lowrank => {
                                Some(add_vector(store, format!("{key}.contraction"), vec![1.0; dims.common])?)
                            }
                            _ => None,
                        };
                        FamilyIds::Factored { factors, contraction }
                    }
                };
                fams.push(FamilyLayout {
                    members: members.clone(),
                    target_pos,
                    ids,
                });
                th.push(store.add(format!("theta.{l}.{f}"), DenseTensor::scalar(1.0), true)?);
            }
            families_out.push(fams);
            thetas.push(th);
        }
        let a = dims.fusion_attention;
        let hier = HierIds {
            w_e: add_matrix(store, rng, "hier.w_e".into(), a, dims.hidden)?,
            u_e: add_matrix(store, rng, "hier.u_e".into(), a, dims.context)?,
            b_e: add_vector(store, "hier.b_e".into(), vec![0.0; a])?,
            score_e: add_vector(store, "hier.score".into(), xavier_uniform(rng, a, 1, a))?,
            w_ph: add_matrix(store, rng, "out.w_h".into(), dims.vocab, dims.hidden)?,
            w_pk: (0..n)
                .map(|m| add_matrix(store, rng, format!("out.w_ctx.{m}"), dims.vocab, dims.context))
                .collect::<Result<Vec<_>>>()?,
            b_p: add_vector(store, "out.b".into(), vec![0.0; dims.vocab])?,
        };
        Ok(Self {
            config: config.clone(),
            dims: dims.clone(),
            projections,
            families: families_out,
            thetas,
            hier,
        })
    }

    pub fn modalities(&self) -> usize {
        self.dims.extents.len()
    }

    /// Snapshot of the current parameter values.
    pub fn params(&self, store: &ParamStore) -> Result<MafParams> {
        let v = |id: ParamId| store.get(id).value.clone();
        let vec = |id: ParamId| store.get(id).value.data().to_vec();
        let projections = self
            .projections
            .iter()
            .map(|p| ProjectionParams {
                w_query: v(p.w_query),
                u_feat: v(p.u_feat),
                bias: vec(p.bias),
                score: vec(p.score),
            })
            .collect();
        let families = self
            .families
            .iter()
            .map(|fams| {
                fams.iter()
                    .map(|fam| {
                        let params = match &fam.ids {
                            FamilyIds::Unary => FamilyParams::Unary,
                            FamilyIds::Dense(id) => FamilyParams::Hoca(ImportanceWeights::Dense(v(*id))),
                            FamilyIds::Factored { factors, contraction } => {
                                let extents: Vec<usize> = fam.members.iter().map(|&i| self.dims.extents[i]).collect();
                                let values = factors.iter().map(|g| g.iter().map(|&id| vec(id)).collect()).collect();
                                let rf = RankFactors::new(fam.target_pos, self.config.rank, &extents, values)?;
                                match contraction {
                                    Some(c) => FamilyParams::Lowrank {
                                        factors: rf,
                                        contraction: Contraction::Learned(ContractionVector(vec(*c))),
                                    },
                                    None => FamilyParams::Hoca(ImportanceWeights::Factored(rf)),
                                }
                            }
                        };
                        Ok(Family {
                            members: fam.members.clone(),
                            params,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let thetas = self
            .thetas
            .iter()
            .map(|th| th.iter().map(|&id| store.get(id).value.data()[0]).collect())
            .collect();
        let h = &self.hier;
        let hier = HierarchicalParams {
            w_e: v(h.w_e),
            u_e: v(h.u_e),
            b_e: vec(h.b_e),
            score_e: vec(h.score_e),
            w_ph: v(h.w_ph),
            w_pk: h.w_pk.iter().map(|&id| v(id)).collect(),
            b_p: vec(h.b_p),
        };
        Ok(MafParams {
            query_free: self.config.query_free,
            projections,
            families,
            thetas,
            hier,
        })
    }

    /// Parameter leaves for one graph.
    pub fn vars(&self, g: &mut Graph, store: &ParamStore) -> MafVars {
        let projections = self
            .projections
            .iter()
            .map(|p| ProjectionVars {
                w_query: g.param(store, p.w_query),
                u_feat: g.param(store, p.u_feat),
                bias: g.param(store, p.bias),
                score: g.param(store, p.score),
            })
            .collect();
        let families = self
            .families
            .iter()
            .map(|fams| {
                fams.iter()
                    .map(|fam| match &fam.ids {
                        FamilyIds::Unary => FamilyVars::Unary,
                        FamilyIds::Dense(id) => FamilyVars::Dense(g.param(store, *id)),
                        FamilyIds::Factored { factors, contraction } => FamilyVars::Factored {
                            factors: factors
                                .iter()
                                .map(|grp| grp.iter().map(|&id| g.param(store, id)).collect())
                                .collect(),
                            contraction: contraction.map(|c| g.param(store, c)),
                        },
                    })
                    .collect()
            })
            .collect();
        let thetas = self
            .thetas
            .iter()
            .map(|th| th.iter().map(|&id| g.param(store, id)).collect())
            .collect();
        let h = &self.hier;
        let hier = HierVars {
            w_e: g.param(store, h.w_e),
            u_e: g.param(store, h.u_e),
            b_e: g.param(store, h.b_e),
            score_e: g.param(store, h.score_e),
            w_ph: g.param(store, h.w_ph),
            w_pk: h.w_pk.iter().map(|&id| g.param(store, id)).collect(),
            b_p: g.param(store, h.b_p),
        };
        MafVars {
            projections,
            families,
            thetas,
            hier,
        }
    }
}

#[derive(Debug, Clone)]
pub enum FamilyVars {
    Unary,
    Factored {
        factors: Vec<Vec<Var>>,
        contraction: Option<Var>,
    },
    Dense(Var),
}

#[derive(Debug, Clone)]
pub struct HierVars {
    pub w_e: Var,
    pub u_e: Var,
    pub b_e: Var,
    pub score_e: Var,
    pub w_ph: Var,
    pub w_pk: Vec<Var>,
    pub b_p: Var,
}

#[derive(Debug, Clone)]
pub struct MafVars {
    pub projections: Vec<ProjectionVars>,
    pub families: Vec<Vec<FamilyVars>>,
    pub thetas: Vec<Vec<Var>>,
    pub hier: HierVars,
}

/// Graph nodes produced by one fusion step.
#[derive(Debug, Clone)]
pub struct MafStepNodes {
    pub families: Vec<Vec<Var>>,
    pub combined: Vec<Var>,
    pub contexts: Vec<Var>,
    pub beta: Var,
    pub logits: Var,
}

/// Query-independent projections `U·E`, one per modality.
pub fn precompute_node(g: &mut Graph, vars: &MafVars, encoded: &[Var]) -> Result<Vec<Var>> {
    encoded
        .iter()
        .zip(&vars.projections)
        .map(|(&e, p)| project_features_node(g, e, p))
        .collect()
}

/// Graph form of [`maf_step`]. `projected` comes from [`precompute_node`].
pub fn maf_step_node(
    g: &mut Graph,
    layout: &MafLayout,
    vars: &MafVars,
    query: Var,
    encoded: &[Var],
    projected: &[Var],
) -> Result<MafStepNodes> {
    let n = layout.modalities();
    if encoded.len() != n || projected.len() != n {
        return dim_err(format!("{n} modalities expected"));
    }
    let q = if layout.config.query_free { None } else { Some(query) };
    let common = projected
        .iter()
        .zip(&vars.projections)
        .map(|(&p, pv)| project_common_node(g, p, q, pv))
        .collect::<Result<Vec<_>>>()?;

    let mut correlations: Vec<(Vec<usize>, Var)> = Vec::new();
    let mut families = Vec::with_capacity(n);
    let mut combined = Vec::with_capacity(n);
    let mut contexts = Vec::with_capacity(n);
    for l in 0..n {
        let mut weighted = Vec::new();
        let mut fam_nodes = Vec::new();
        for ((fam, fv), &theta) in layout.families[l].iter().zip(&vars.families[l]).zip(&vars.thetas[l]) {
            let subset: Vec<Var> = fam.members.iter().map(|&i| common[i]).collect();
            let scores = match fv {
                FamilyVars::Unary => {
                    let score = vars.projections[l].score;
                    if layout.config.mechanism == Mechanism::Lowrank {
                        let ones = bl_vector_node(g, &subset, &[Vec::new()], 0, layout.dims.common)?;
                        lowrank_scores_node(g, common[l], ones, Some(score))?
                    } else {
                        g.vecmat(score, common[l])?
                    }
                }
                FamilyVars::Factored { factors, contraction } if layout.config.mechanism == Mechanism::Lowrank => {
                    let b = bl_vector_node(g, &subset, factors, fam.target_pos, layout.dims.common)?;
                    lowrank_scores_node(g, common[l], b, *contraction)?
                }
                FamilyVars::Factored { factors, .. } => {
                    let c = correlation(g, &mut correlations, &fam.members, &subset)?;
                    let w = reconstruct_dense_weight_node(g, factors, fam.target_pos)?;
                    g.contract_slices(c, w, fam.target_pos)?
                }
                FamilyVars::Dense(w) => {
                    let c = correlation(g, &mut correlations, &fam.members, &subset)?;
                    g.contract_slices(c, *w, fam.target_pos)?
                }
            };
            let alpha = g.softmax(scores)?;
            fam_nodes.push(alpha);
            weighted.push(g.mul_scalar(alpha, theta)?);
        }
        let pre = g.add_all(&weighted)?;
        let alpha = g.softmax(pre)?;
        contexts.push(g.matvec(encoded[l], alpha)?);
        combined.push(alpha);
        families.push(fam_nodes);
    }

    let h = &vars.hier;
    let wh = g.matvec(h.w_e, query)?;
    let whb = g.add(wh, h.b_e)?;
    let mut es = Vec::with_capacity(n);
    for &phi in &contexts {
        let u = g.matvec(h.u_e, phi)?;
        let pre = g.add(u, whb)?;
        let act = g.tanh(pre)?;
        es.push(g.dot(h.score_e, act)?);
    }
    let e = g.concat(&es)?;
    let beta = g.softmax(e)?;
    let mut terms = vec![g.matvec(h.w_ph, query)?];
    for (k, (&phi, &w)) in contexts.iter().zip(&h.w_pk).enumerate() {
        let d = g.matvec(w, phi)?;
        let bk = g.slice(beta, k, 1)?;
        terms.push(g.mul_scalar(d, bk)?);
    }
    terms.push(h.b_p);
    let logits = g.add_all(&terms)?;
    Ok(MafStepNodes {
        families,
        combined,
        contexts,
        beta,
        logits,
    })
}

fn correlation(g: &mut Graph, cache: &mut Vec<(Vec<usize>, Var)>, members: &[usize], subset: &[Var]) -> Result<Var> {
    if let Some((_, c)) = cache.iter().find(|(m, _)| m == members) {
        return Ok(*c);
    }
    let c = g.tensor_multiply(subset)?;
    cache.push((members.to_vec(), c));
    Ok(c)
}

/// Shape of the importance tensor for a family, used by size accounting.
pub fn family_weight_shape(dims: &MafDims, fam: &FamilyLayout) -> Vec<usize> {
    let extents: Vec<usize> = fam.members.iter().map(|&i| dims.extents[i]).collect();
    non_target_shape(&extents, fam.target_pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::rng::{seeded, uniform_vec};

    fn dims(extents: Vec<usize>) -> MafDims {
        MafDims {
            extents,
            context: 3,
            hidden: 4,
            common: 3,
            fusion_attention: 3,
            vocab: 5,
        }
    }

    fn random_encoded(rng: &mut HocaRng, d: &MafDims) -> Vec<FeatureMatrix> {
        d.extents
            .iter()
            .map(|&t| FeatureMatrix::new(d.context, t, uniform_vec(rng, d.context * t, -1.0, 1.0)).unwrap())
            .collect()
    }

    fn build(config: &MafConfig, d: &MafDims, seed: u64) -> (ParamStore, MafLayout) {
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let layout = MafLayout::register(&mut store, &mut rng, config, d).unwrap();
        (store, layout)
    }

    fn graph_step(store: &ParamStore, layout: &MafLayout, enc: &[FeatureMatrix], h: &[f64]) -> (Graph, MafStepNodes) {
        let mut g = Graph::new();
        let vars = layout.vars(&mut g, store);
        let e: Vec<Var> = enc.iter().map(|m| g.features(m)).collect();
        let proj = precompute_node(&mut g, &vars, &e).unwrap();
        let q = g.vector(h.to_vec()).unwrap();
        let nodes = maf_step_node(&mut g, layout, &vars, q, &e, &proj).unwrap();
        (g, nodes)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn family_enumeration() {
        let all = ArityConfig::all();
        assert_eq!(
            families(3, 0, &all),
            vec![vec![0], vec![0, 1], vec![0, 2], vec![0, 1, 2]]
        );
        assert_eq!(families(3, 2, &all), vec![vec![2], vec![0, 2], vec![1, 2], vec![0, 1, 2]]);
        assert_eq!(families(3, 1, &ArityConfig::new(&[2]).unwrap()).len(), 2);
        assert_eq!(families(4, 1, &ArityConfig::new(&[3]).unwrap()).len(), 3);
    }

    #[test]
    fn config_validation() {
        let mut c = MafConfig {
            mechanism: Mechanism::Unary,
            ..MafConfig::default()
        };
        assert!(c.validate(3).is_err());
        c.arities = ArityConfig::unary();
        assert!(c.validate(1).is_ok());
        let c = MafConfig::default();
        assert!(matches!(c.validate(2), Err(HocaError::Config(_))));
        assert!(ArityConfig::new(&[]).is_err());
        assert!(ArityConfig::new(&[4]).is_err());
        assert_eq!("3,1".parse::<ArityConfig>().unwrap().as_slice(), &[1, 3]);
        assert!("lowrank".parse::<Mechanism>().is_ok());
        assert!("dense".parse::<Mechanism>().is_err());
    }

    #[test]
    fn three_modalities_give_four_families_each() {
        let d = dims(vec![3, 2, 4]);
        let (store, layout) = build(&MafConfig::default(), &d, 1);
        let params = layout.params(&store).unwrap();
        let mut rng = seeded(2);
        let enc = random_encoded(&mut rng, &d);
        let w = arity_weights(&Query(vec![0.1, 0.2, -0.3, 0.4]), &enc, &params).unwrap();
        for (l, fams) in w.iter().enumerate() {
            assert_eq!(fams.len(), 4);
            for f in fams {
                assert_eq!(f.len(), d.extents[l]);
                assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_modality_unary_is_additive_attention() {
        let d = dims(vec![5]);
        let config = MafConfig {
            mechanism: Mechanism::Unary,
            arities: ArityConfig::unary(),
            ..MafConfig::default()
        };
        let (store, layout) = build(&config, &d, 3);
        let params = layout.params(&store).unwrap();
        let mut rng = seeded(4);
        let enc = random_encoded(&mut rng, &d);
        let q = Query(vec![0.3, -0.1, 0.2, 0.9]);
        let w = arity_weights(&q, &enc, &params).unwrap();
        let direct = crate::bahdanau::unary_scores(&q, &enc[0], &params.projections[0]).unwrap();
        assert_eq!(w[0][0], softmax_stable(&direct).unwrap());
    }

    #[test]
    fn combine_examples() {
        let u = AttentionWeights::from_simplex(vec![0.2, 0.3, 0.5]);
        let v = AttentionWeights::from_simplex(vec![0.6, 0.3, 0.1]);
        let zero = combine_weights(&[u.clone(), v.clone()], &[0.0, 0.0]).unwrap();
        assert!(zero.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

        let hot = AttentionWeights::from_simplex(vec![0.0, 1.0, 0.0]);
        let lim = combine_weights(&[u.clone(), hot], &[0.0, 50.0]).unwrap();
        assert!(close(&lim, &[0.0, 1.0, 0.0], 1e-6));

        let same = combine_weights(&[u.clone(), u.clone()], &[0.7, 1.8]).unwrap();
        let scaled: Vec<f64> = u.iter().map(|x| 2.5 * x).collect();
        assert!(close(&same, &softmax_stable(&scaled).unwrap(), 1e-15));

        assert!(combine_weights(&[u, AttentionWeights::from_simplex(vec![1.0])], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn modality_weights_examples() {
        let d = dims(vec![2, 2]);
        let config = MafConfig {
            arities: ArityConfig::new(&[1, 2]).unwrap(),
            ..MafConfig::default()
        };
        let (mut store, layout) = build(&config, &d, 5);
        let q = Query(vec![0.5, -0.5, 0.1, 0.0]);
        let params = layout.params(&store).unwrap();
        let phi = vec![0.3, -0.7, 0.2];
        let beta = hierarchical_modality_weights(&q, &[phi.clone(), phi.clone()], &params.hier).unwrap();
        assert!(close(&beta, &[0.5, 0.5], 1e-15));

        store.set_value("hier.score", DenseTensor::vector(vec![0.0; 3]).unwrap()).unwrap();
        let params = layout.params(&store).unwrap();
        let beta = hierarchical_modality_weights(&q, &[phi, vec![9.0, 1.0, -4.0]], &params.hier).unwrap();
        assert_eq!(beta.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn fused_logits_examples() {
        let d = dims(vec![3, 2]);
        let config = MafConfig {
            mechanism: Mechanism::Hoca,
            arities: ArityConfig::new(&[1, 2]).unwrap(),
            ..MafConfig::default()
        };
        let (mut store, layout) = build(&config, &d, 6);
        let q = Query(vec![0.2, 0.1, -0.4, 0.3]);
        let ctx = vec![vec![0.1, 0.2, 0.3], vec![-0.3, 0.0, 0.5]];
        let params = layout.params(&store).unwrap();
        let (_, p) = fused_logits(&q, &ctx, &[0.4, 0.6], &params.hier).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // With β ≡ 1 the fused form is the plain sum over modalities.
        let (logits, _) = fused_logits(&q, &ctx, &[1.0, 1.0], &params.hier).unwrap();
        let h = &params.hier;
        for v in 0..5 {
            let mut expected = h.b_p[v];
            for j in 0..4 {
                expected += h.w_ph.get(&[v, j]).unwrap() * q.0[j];
            }
            for (k, c) in ctx.iter().enumerate() {
                for (j, x) in c.iter().enumerate() {
                    expected += h.w_pk[k].get(&[v, j]).unwrap() * x;
                }
            }
            assert!((logits[v] - expected).abs() < 1e-14);
        }

        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let params = layout.params(&store).unwrap();
        let (_, p) = fused_logits(&q, &ctx, &[0.4, 0.6], &params.hier).unwrap();
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn graph_matches_plain_values_for_every_mechanism() {
        let d = dims(vec![3, 2, 4]);
        let configs = [
            MafConfig::default(),
            MafConfig {
                mechanism: Mechanism::Hoca,
                rank: 2,
                ..MafConfig::default()
            },
            MafConfig {
                mechanism: Mechanism::Hoca,
                dense_importance: true,
                ..MafConfig::default()
            },
            MafConfig {
                mechanism: Mechanism::Unary,
                arities: ArityConfig::unary(),
                query_free: true,
                ..MafConfig::default()
            },
        ];
        for (s, config) in configs.iter().enumerate() {
            let (store, layout) = build(config, &d, 10 + s as u64);
            let mut rng = seeded(20 + s as u64);
            let enc = random_encoded(&mut rng, &d);
            let h = uniform_vec(&mut rng, 4, -1.0, 1.0);
            let plain = maf_step(&Query(h.clone()), &enc, &layout.params(&store).unwrap()).unwrap();
            let (g, nodes) = graph_step(&store, &layout, &enc, &h);
            for l in 0..3 {
                for (f, &node) in nodes.families[l].iter().enumerate() {
                    assert!(close(g.value(node).data(), &plain.families[l][f], 1e-12), "{config:?}");
                }
                assert!(close(g.value(nodes.combined[l]).data(), &plain.combined[l], 1e-12));
            }
            assert!(close(g.value(nodes.beta).data(), &plain.beta, 1e-12));
            assert!(close(g.value(nodes.logits).data(), &plain.logits, 1e-12));
        }
    }

    #[test]
    fn disabled_arity_equals_zero_theta() {
        let d = dims(vec![3, 3, 3]);
        let (mut store, layout) = build(&MafConfig::default(), &d, 30);
        let mut rng = seeded(31);
        let enc = random_encoded(&mut rng, &d);
        let q = Query(uniform_vec(&mut rng, 4, -1.0, 1.0));
        for l in 0..3 {
            store.get_mut(layout.thetas[l][3]).value.data_mut()[0] = 0.0;
        }
        let full = layout.params(&store).unwrap();
        let mut reduced = full.clone();
        for l in 0..3 {
            reduced.families[l].truncate(3);
            reduced.thetas[l].truncate(3);
        }
        let a = maf_step(&q, &enc, &full).unwrap();
        let b = maf_step(&q, &enc, &reduced).unwrap();
        assert_eq!(a.combined, b.combined);
    }

    #[test]
    fn symmetric_modalities_get_equal_binary_weights() {
        let d = dims(vec![3, 3]);
        let config = MafConfig {
            arities: ArityConfig::new(&[2]).unwrap(),
            rank: 2,
            ..MafConfig::default()
        };
        let (store, layout) = build(&config, &d, 32);
        let mut params = layout.params(&store).unwrap();
        params.projections[1] = params.projections[0].clone();
        let f0 = params.families[0][0].params.clone();
        if let FamilyParams::Lowrank { factors, contraction } = f0 {
            let swapped = RankFactors::new(1, 2, &[3, 3], vec![factors.factors_of(1).to_vec(), vec![]]).unwrap();
            params.families[1][0].params = FamilyParams::Lowrank {
                factors: swapped,
                contraction,
            };
        } else {
            panic!("expected low-rank family");
        }
        let mut rng = seeded(33);
        let e = random_encoded(&mut rng, &d).remove(0);
        let w = arity_weights(&Query(vec![0.1, 0.4, -0.2, 0.3]), &[e.clone(), e], &params).unwrap();
        assert_eq!(w[0][0], w[1][0]);
    }

    #[test]
    fn fused_step_gradients_check() {
        let d = MafDims {
            extents: vec![2, 3, 2],
            context: 2,
            hidden: 3,
            common: 2,
            fusion_attention: 2,
            vocab: 4,
        };
        for mechanism in [Mechanism::Lowrank, Mechanism::Hoca] {
            let config = MafConfig {
                mechanism,
                ..MafConfig::default()
            };
            let (mut store, layout) = build(&config, &d, 40);
            let mut rng = seeded(41);
            let enc = random_encoded(&mut rng, &d);
            let h = uniform_vec(&mut rng, 3, -1.0, 1.0);
            let ids: Vec<ParamId> = store.ids().collect();
            let check = finite_diff_check(&mut store, &ids, 1e-6, |s, g| {
                let vars = layout.vars(g, s);
                let e: Vec<Var> = enc.iter().map(|m| g.features(m)).collect();
                let proj = precompute_node(g, &vars, &e)?;
                let q = g.vector(h.clone())?;
                let nodes = maf_step_node(g, &layout, &vars, q, &e, &proj)?;
                g.softmax_cross_entropy(nodes.logits, 2)
            })
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "{mechanism}: {check:?}");
        }
    }
}
