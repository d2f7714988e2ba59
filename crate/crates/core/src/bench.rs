//! Space and time measurements for the attention kernels, and the rank sweep.
//!
//! Space is counted in stored `f64` values. Each mechanism follows its own
//! accounting convention, chosen so the closed forms below are exact:
//!
//! * unary: the score vector (`d`) plus one weight vector per modality;
//! * dense HOCA: the correlation tensor (once, shared by every target), one
//!   importance tensor per target, and one weight vector per modality;
//! * low-rank HOCA: the `tanh` outputs, `k` factor vectors per modality, the
//!   `n·k` global-information vectors, one `B_l` per target, one contraction
//!   vector, and one weight vector per modality.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bahdanau::scores_from_common;
use crate::captioner::{synth_dataset, train, Captioner, DatasetSpec, Item, ModelConfig, Split, TrainConfig};
use crate::error::{HocaError, Result};
use crate::hoca::{non_target_shape, scores_from_correlation};
use crate::lowrank::global_info;
use crate::maf::Mechanism;
use crate::rng::{stream, uniform_vec, HocaRng};
use crate::tensor::{element_count, softmax_stable, tensor_multiply_capped, DenseTensor, FeatureMatrix};

/// Element-count products saturate instead of overflowing.
fn product(values: impl IntoIterator<Item = usize>) -> u64 {
    values.into_iter().fold(1u64, |acc, v| acc.saturating_mul(v as u64))
}

/// Closed-form stored-value count for one mechanism.
pub fn predicted_space(mechanism: Mechanism, extents: &[usize], d: usize, k: usize) -> u64 {
    let n = extents.len() as u64;
    let (d, k) = (d as u64, k as u64);
    let sum_t: u64 = extents.iter().map(|&t| t as u64).sum();
    match mechanism {
        Mechanism::Unary => sum_t + d,
        Mechanism::Hoca => {
            let all = product(extents.iter().copied());
            let per_target: u64 = (0..extents.len())
                .map(|i| product(non_target_shape(extents, i)))
                .fold(0, u64::saturating_add);
            all.saturating_add(per_target).saturating_add(sum_t)
        }
        Mechanism::Lowrank => sum_t * (k + d + 1) + (n * k + n + 1) * d,
    }
}

/// One measured configuration. `counted` and `wall_ns` are `None` when the
/// dense path would exceed the capacity cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceReport {
    pub mechanism: Mechanism,
    pub extents: Vec<usize>,
    pub d: usize,
    pub k: usize,
    pub counted: Option<u64>,
    pub predicted: u64,
    /// Dense HOCA only: the count if every target built its own correlation
    /// tensor.
    pub counted_unshared: Option<u64>,
    /// Median wall time of one forward pass over all targets.
    pub wall_ns: Option<u64>,
}

impl SpaceReport {
    pub fn n(&self) -> usize {
        self.extents.len()
    }

    pub fn capped(&self) -> bool {
        self.counted.is_none()
    }

    /// Largest extent, which is the shared `t` for uniform sweeps.
    pub fn t(&self) -> usize {
        self.extents.iter().copied().max().unwrap_or(0)
    }
}

/// Random inputs for one measurement: `tanh` outputs in `(−1, 1)` and the
/// parameters each mechanism reads.
struct Instance {
    feats: Vec<FeatureMatrix>,
    score: Vec<f64>,
    /// Dense importance tensor per target.
    dense: Vec<DenseTensor>,
    /// `factors[i][j]`, shared by every target.
    factors: Vec<Vec<Vec<f64>>>,
    contraction: Vec<f64>,
}

impl Instance {
    fn new(rng: &mut HocaRng, mechanism: Mechanism, extents: &[usize], d: usize, k: usize) -> Result<Self> {
        let feats = extents
            .iter()
            .map(|&t| FeatureMatrix::new(d, t, uniform_vec(rng, d * t, -1.0, 1.0)))
            .collect::<Result<Vec<_>>>()?;
        let mut inst = Self {
            feats,
            score: uniform_vec(rng, d, -1.0, 1.0),
            dense: Vec::new(),
            factors: Vec::new(),
            contraction: Vec::new(),
        };
        match mechanism {
            Mechanism::Unary => {}
            Mechanism::Hoca => {
                for l in 0..extents.len() {
                    let shape = non_target_shape(extents, l);
                    let len = element_count(&shape).expect("checked against the cap");
                    inst.dense.push(DenseTensor::new(shape, uniform_vec(rng, len, 0.0, 2.0))?);
                }
            }
            Mechanism::Lowrank => {
                inst.factors = extents
                    .iter()
                    .map(|&t| (0..k).map(|_| uniform_vec(rng, t, 0.9, 1.1)).collect())
                    .collect();
                inst.contraction = uniform_vec(rng, d, 0.9, 1.1);
            }
        }
        Ok(inst)
    }
}

#[derive(Default)]
struct Tally {
    shared: u64,
    unshared: u64,
}

impl Tally {
    fn add(&mut self, len: usize) {
        self.shared += len as u64;
        self.unshared += len as u64;
    }
}

fn forward(mechanism: Mechanism, inst: &Instance, cap: usize, tally: &mut Tally) -> Result<()> {
    let n = inst.feats.len();
    match mechanism {
        Mechanism::Unary => {
            tally.add(inst.score.len());
            for f in &inst.feats {
                let w = softmax_stable(&scores_from_common(f, &inst.score)?)?;
                tally.add(w.len());
            }
        }
        Mechanism::Hoca => {
            let c = tensor_multiply_capped(&inst.feats, cap)?;
            tally.shared += c.len() as u64;
            tally.unshared += (c.len() * n) as u64;
            for (l, weight) in inst.dense.iter().enumerate() {
                tally.add(weight.len());
                let w = softmax_stable(&scores_from_correlation(&c, weight, l)?)?;
                tally.add(w.len());
            }
        }
        Mechanism::Lowrank => {
            let d = inst.contraction.len();
            for (f, fac) in inst.feats.iter().zip(&inst.factors) {
                tally.add(f.values().len());
                tally.add(fac.iter().map(Vec::len).sum());
            }
            tally.add(d);
            let info = inst
                .feats
                .iter()
                .zip(&inst.factors)
                .map(|(f, fac)| fac.iter().map(|w| global_info(f, w)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            tally.add(info.iter().flatten().map(Vec::len).sum());
            let k = inst.factors.first().map_or(0, Vec::len);
            for (l, target) in inst.feats.iter().enumerate() {
                let mut b = vec![0.0; d];
                for j in 0..k {
                    let mut term = vec![1.0; d];
                    for (i, gi) in info.iter().enumerate() {
                        if i != l {
                            term.iter_mut().zip(&gi[j]).for_each(|(x, y)| *x *= y);
                        }
                    }
                    b.iter_mut().zip(&term).for_each(|(x, y)| *x += y);
                }
                if n == 1 {
                    b = vec![1.0; d];
                }
                tally.add(b.len());
                let cb: Vec<f64> = b.iter().zip(&inst.contraction).map(|(x, y)| x * y).collect();
                let w = softmax_stable(&scores_from_common(target, &cb)?)?;
                tally.add(w.len());
            }
        }
    }
    Ok(())
}

/// Runs one forward pass per mechanism with element counting, then times it
/// (median of `runs` after one warm-up). Oversized dense configurations return
/// a capacity error.
pub fn measure_space(mechanism: Mechanism, extents: &[usize], d: usize, k: usize, cap: usize, runs: usize) -> Result<SpaceReport> {
    if extents.is_empty() || extents.contains(&0) || d == 0 {
        return Err(HocaError::Argument("need at least one modality, positive extents and d".into()));
    }
    if mechanism == Mechanism::Lowrank && k == 0 {
        return Err(HocaError::Argument("rank must be at least 1".into()));
    }
    if mechanism == Mechanism::Hoca {
        let total = element_count(extents).filter(|&e| e <= cap);
        if total.is_none() {
            return Err(HocaError::Capacity {
                requested: element_count(extents).unwrap_or(usize::MAX),
                cap,
            });
        }
    }
    let seed = extents.iter().fold(d as u64 * 31 + k as u64, |acc, &t| acc.wrapping_mul(131).wrapping_add(t as u64));
    let mut rng = stream(seed, 0xbe7c);
    let inst = Instance::new(&mut rng, mechanism, extents, d, k)?;
    let mut tally = Tally::default();
    forward(mechanism, &inst, cap, &mut tally)?;
    let mut times = Vec::with_capacity(runs);
    for i in 0..=runs {
        let start = Instant::now();
        forward(mechanism, &inst, cap, &mut Tally::default())?;
        if i > 0 {
            times.push(start.elapsed().as_nanos() as u64);
        }
    }
    times.sort_unstable();
    Ok(SpaceReport {
        mechanism,
        extents: extents.to_vec(),
        d,
        k,
        counted: Some(tally.shared),
        predicted: predicted_space(mechanism, extents, d, k),
        counted_unshared: (mechanism == Mechanism::Hoca).then_some(tally.unshared),
        wall_ns: times.get(times.len() / 2).copied(),
    })
}

/// Grid for [`scaling_sweep`]; every modality shares the same `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub mechanisms: Vec<Mechanism>,
    pub n: Vec<usize>,
    pub t: Vec<usize>,
    pub k: Vec<usize>,
    pub d: usize,
    pub max_elements: usize,
    pub runs: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            mechanisms: vec![Mechanism::Unary, Mechanism::Hoca, Mechanism::Lowrank],
            n: (1..=6).collect(),
            t: vec![2, 4, 8, 16],
            k: vec![1, 4],
            d: 8,
            max_elements: 1 << 22,
            runs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub reports: Vec<SpaceReport>,
    /// Measured counts that differ from the closed form.
    pub count_mismatches: Vec<String>,
    /// Configurations with `n ≥ 2`, `t ≥ 2` where low-rank stores more than
    /// dense.
    pub ordering_violations: Vec<String>,
    /// Configurations with `n ≥ 3`, `t ≥ 32` where low-rank is slower.
    pub timing_violations: Vec<String>,
}

/// Measures every grid point. Mechanisms that ignore `k` are measured once
/// per `(n, t)`; capped dense points are kept with `counted = None`.
pub fn scaling_sweep(grid: &SweepGrid) -> Result<SweepResult> {
    let mut reports = Vec::new();
    for &mech in &grid.mechanisms {
        for &n in &grid.n {
            for &t in &grid.t {
                let ks: &[usize] = if mech == Mechanism::Lowrank { &grid.k } else { &grid.k[..grid.k.len().min(1)] };
                for &k in ks {
                    let extents = vec![t; n];
                    let report = match measure_space(mech, &extents, grid.d, k, grid.max_elements, grid.runs) {
                        Err(HocaError::Capacity { .. }) => SpaceReport {
                            mechanism: mech,
                            extents,
                            d: grid.d,
                            k,
                            counted: None,
                            predicted: predicted_space(mech, &vec![t; n], grid.d, k),
                            counted_unshared: None,
                            wall_ns: None,
                        },
                        other => other?,
                    };
                    reports.push(report);
                }
            }
        }
    }
    let mut result = SweepResult {
        count_mismatches: Vec::new(),
        ordering_violations: Vec::new(),
        timing_violations: Vec::new(),
        reports,
    };
    for r in &result.reports {
        if let Some(c) = r.counted {
            if c != r.predicted {
                result.count_mismatches.push(format!(
                    "{} n={} t={} k={}: counted {c}, predicted {}",
                    r.mechanism,
                    r.n(),
                    r.t(),
                    r.k,
                    r.predicted
                ));
            }
        }
    }
    for low in result.reports.iter().filter(|r| r.mechanism == Mechanism::Lowrank) {
        let Some(dense) = result
            .reports
            .iter()
            .find(|r| r.mechanism == Mechanism::Hoca && r.extents == low.extents && !r.capped())
        else {
            continue;
        };
        let (n, t) = (low.n(), low.t());
        if n >= 2 && t >= 2 && low.counted > dense.counted {
            result.ordering_violations.push(format!(
                "n={n} t={t} k={}: low-rank {} > dense {}",
                low.k,
                low.counted.unwrap_or(0),
                dense.counted.unwrap_or(0)
            ));
        }
        if n >= 3 && t >= 32 && low.wall_ns > dense.wall_ns {
            result.timing_violations.push(format!(
                "n={n} t={t} k={}: low-rank {} ns > dense {} ns",
                low.k,
                low.wall_ns.unwrap_or(0),
                dense.wall_ns.unwrap_or(0)
            ));
        }
    }
    Ok(result)
}

/// Template for [`rank_sweep`]; only the rank varies between runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSweepConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub seed: u64,
    pub val_loss: f64,
    pub val_token_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub rank: usize,
    pub runs: usize,
    pub mean_acc: f64,
    pub min_acc: f64,
    pub max_acc: f64,
}

/// Trains one model per `(rank, seed)`. The seed drives the dataset, the
/// initialisation and the training order. Values are taken after the last
/// epoch.
pub fn rank_sweep(config: &RankSweepConfig) -> Result<Vec<RankRow>> {
    let mut rows = Vec::with_capacity(config.ranks.len() * config.seeds.len());
    for &rank in &config.ranks {
        for &seed in &config.seeds {
            rows.push(rank_run(config, rank, seed)?);
        }
    }
    Ok(rows)
}

fn rank_run(config: &RankSweepConfig, rank: usize, seed: u64) -> Result<RankRow> {
    let ds = synth_dataset(seed, &config.dataset)?;
    let mut model_cfg = config.model.clone();
    model_cfg.maf.rank = rank;
    let mut model = Captioner::new(&model_cfg, &ds.data_shape(), seed)?;
    let tr: Vec<&Item> = ds.split(Split::Train).collect();
    let va: Vec<&Item> = ds.split(Split::Val).collect();
    let train_cfg = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let curve = train(&mut model, &tr, &va, &train_cfg)?;
    let (val_loss, val_token_acc) = match curve.last() {
        Some(r) => (r.val_loss, r.val_token_acc),
        None => {
            let e = crate::captioner::evaluate(&model.snapshot()?, &va)?;
            (e.loss, e.token_acc)
        }
    };
    Ok(RankRow {
        rank,
        seed,
        val_loss,
        val_token_acc,
    })
}

/// Mean and spread of accuracy per rank, in first-seen rank order.
pub fn summarise_ranks(rows: &[RankRow]) -> Vec<RankSummary> {
    let mut ranks: Vec<usize> = Vec::new();
    for r in rows {
        if !ranks.contains(&r.rank) {
            ranks.push(r.rank);
        }
    }
    ranks
        .into_iter()
        .map(|rank| {
            let accs: Vec<f64> = rows.iter().filter(|r| r.rank == rank).map(|r| r.val_token_acc).collect();
            RankSummary {
                rank,
                runs: accs.len(),
                mean_acc: accs.iter().sum::<f64>() / accs.len() as f64,
                min_acc: accs.iter().copied().fold(f64::INFINITY, f64::min),
                max_acc: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamConfig;

    #[test]
    fn closed_form_examples() {
        let e = [64, 64, 64];
        assert_eq!(predicted_space(Mechanism::Hoca, &e, 8, 1), 262_144 + 3 * 4096 + 192);
        assert_eq!(predicted_space(Mechanism::Unary, &e, 8, 1), 192 + 8);
        assert_eq!(predicted_space(Mechanism::Lowrank, &e, 8, 1), 192 * 10 + 7 * 8);
        for n in 2..=6 {
            let ext = vec![8; n];
            let pow = 8u64.pow(n as u32);
            assert_eq!(predicted_space(Mechanism::Hoca, &ext, 8, 1), pow + n as u64 * pow / 8 + 8 * n as u64);
        }
    }

    #[test]
    fn measured_counts_match_closed_forms() {
        for mech in [Mechanism::Unary, Mechanism::Hoca, Mechanism::Lowrank] {
            for ext in [vec![3], vec![2, 5], vec![4, 1, 3], vec![2, 2, 2, 2]] {
                for k in [1, 3] {
                    let r = measure_space(mech, &ext, 4, k, 1 << 20, 1).unwrap();
                    assert_eq!(r.counted, Some(r.predicted), "{mech} {ext:?} k={k}");
                }
            }
        }
    }

    #[test]
    fn dense_shares_one_correlation_tensor() {
        let r = measure_space(Mechanism::Hoca, &[4, 4, 4], 2, 1, 1 << 20, 1).unwrap();
        assert_eq!(r.counted_unshared.unwrap() - r.counted.unwrap(), 2 * 64);
    }

    #[test]
    fn capped_configs_are_marked_not_fatal() {
        assert!(matches!(
            measure_space(Mechanism::Hoca, &[16, 16, 16], 2, 1, 1000, 1),
            Err(HocaError::Capacity { requested: 4096, cap: 1000 })
        ));
        let grid = SweepGrid {
            n: vec![2, 3],
            t: vec![16],
            k: vec![1],
            max_elements: 1000,
            runs: 1,
            ..SweepGrid::default()
        };
        let res = scaling_sweep(&grid).unwrap();
        let capped: Vec<_> = res.reports.iter().filter(|r| r.capped()).collect();
        assert_eq!(capped.len(), 1);
        assert_eq!((capped[0].mechanism, capped[0].n()), (Mechanism::Hoca, 3));
        assert!(res.count_mismatches.is_empty());
    }

    #[test]
    fn low_rank_grows_linearly_in_n() {
        let counts: Vec<u64> = (1..=6)
            .map(|n| measure_space(Mechanism::Lowrank, &vec![8; n], 8, 1, usize::MAX, 1).unwrap().counted.unwrap())
            .collect();
        let steps: Vec<u64> = counts.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(steps.windows(2).all(|s| s[0] == s[1]), "{counts:?}");
    }

    #[test]
    fn rank_sweep_rows() {
        let config = RankSweepConfig {
            dataset: DatasetSpec {
                n_items: 10,
                ..DatasetSpec::default()
            },
            model: ModelConfig {
                hidden: 4,
                encoder_hidden: 2,
                embed: 3,
                common: 3,
                fusion_attention: 2,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 1,
                batch_size: 4,
                adam: AdamConfig::default(),
                seed: 0,
            },
            ranks: vec![1, 2],
            seeds: vec![3, 4],
        };
        let rows = rank_sweep(&config).unwrap();
        assert_eq!(rows.len(), 4);
        assert_ne!(rows[0].val_loss, rows[1].val_loss);
        let summary = summarise_ranks(&rows);
        assert_eq!(summary.len(), 2);
        assert_eq!(summary[0].runs, 2);

        let single = rank_sweep(&RankSweepConfig {
            ranks: vec![1],
            seeds: vec![3],
            ..config.clone()
        })
        .unwrap();
        let ds = synth_dataset(3, &config.dataset).unwrap();
        let mut m = Captioner::new(&config.model, &ds.data_shape(), 3).unwrap();
        let tr: Vec<&Item> = ds.split(Split::Train).collect();
        let va: Vec<&Item> = ds.split(Split::Val).collect();
        let curve = train(&mut m, &tr, &va, &TrainConfig { seed: 3, ..config.train.clone() }).unwrap();
        assert_eq!(single[0].val_loss.to_bits(), curve[0].val_loss.to_bits());
    }
}
