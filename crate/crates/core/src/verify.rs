//! Executable invariant suites with machine-readable summaries.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, AdamConfig, DEFAULT_EPS};
use crate::bench::{scaling_sweep, SweepGrid};
use crate::captioner::{
    beam_decode, enumerate_best, greedy_decode, synth_dataset, train, Captioner, DataShape, DatasetSpec, Item,
    ItemDecoder, ModelConfig, Split, TrainConfig,
};
use crate::error::{HocaError, Result};
use crate::hoca::scores_from_correlation;
use crate::lowrank::{lowrank_scores, reconstruct_dense_weight, Contraction, RankFactors};
use crate::maf::{ArityConfig, MafConfig, Mechanism};
use crate::rng::{stream, uniform_vec, HocaRng};
use crate::tensor::{outer_rank1, tensor_multiply, FeatureMatrix};

pub use crate::autodiff::relative_error as rel_err;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Propositions,
    Equivalence,
    Complexity,
    Gradients,
    Unary,
    Beam,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Propositions,
        Suite::Equivalence,
        Suite::Complexity,
        Suite::Gradients,
        Suite::Unary,
        Suite::Beam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Propositions => "propositions",
            Suite::Equivalence => "equivalence",
            Suite::Complexity => "complexity",
            Suite::Gradients => "gradients",
            Suite::Unary => "unary",
            Suite::Beam => "beam",
        }
    }

    /// Largest error the suite accepts.
    pub fn tolerance(self) -> f64 {
        match self {
            Suite::Propositions => 1e-10,
            Suite::Equivalence => 1e-8,
            Suite::Gradients => 1e-4,
            Suite::Complexity | Suite::Unary | Suite::Beam => 0.0,
        }
    }

    pub fn run(self) -> Result<SuiteReport> {
        match self {
            Suite::Propositions => propositions(20),
            Suite::Equivalence => equivalence(100),
            Suite::Complexity => complexity(),
            Suite::Gradients => gradients(),
            Suite::Unary => unary_equivalence(0),
            Suite::Beam => beam(100, 20),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = HocaError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Suite::ALL.iter().map(|s| s.as_str()).collect();
                HocaError::Argument(format!("unknown suite {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Outcome of one suite. For exact suites `max_error` counts mismatching
/// cases instead of a numeric error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// First few failing cases, for the log.
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(suite: Suite) -> Self {
        Self {
            suite,
            cases: 0,
            max_error: 0.0,
            tolerance: suite.tolerance(),
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_error <= self.tolerance
    }

    fn record(&mut self, err: f64, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if err > self.max_error || err.is_nan() {
            self.max_error = if err.is_nan() { f64::INFINITY } else { err };
        }
        if !(err <= self.tolerance) && self.failures.len() < 5 {
            self.failures.push(describe());
        }
    }
}

fn random_features(rng: &mut HocaRng, d: usize, t: usize) -> FeatureMatrix {
    FeatureMatrix::new(d, t, uniform_vec(rng, d * t, -1.0, 1.0)).expect("positive shape")
}

/// All tuples of length `n` over `values`.
fn tuples(values: &[usize], n: usize) -> Vec<Vec<usize>> {
    (0..n).fold(vec![Vec::new()], |acc, _| {
        acc.iter()
            .flat_map(|prefix| {
                values.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

/// Row scaling commutes with the correlation tensor, and its full sum
/// factorises through row sums. Grid: `n ∈ 1..=4`, `d ∈ {1,2,5}`,
/// `t_i ∈ {1,2,3,5}`.
pub fn propositions(seeds: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::Propositions);
    for n in 1..=4 {
        for extents in tuples(&[1, 2, 3, 5], n) {
            for d in [1, 2, 5] {
                for seed in 0..seeds {
                    let mut rng = stream(seed, 0x9a0 + (n * 1000 + d) as u64);
                    let feats: Vec<FeatureMatrix> = extents.iter().map(|&t| random_features(&mut rng, d, t)).collect();
                    let ws: Vec<Vec<f64>> = extents.iter().map(|&t| uniform_vec(&mut rng, t, -1.0, 1.0)).collect();

                    let c = tensor_multiply(&feats)?;
                    let w_refs: Vec<&[f64]> = ws.iter().map(Vec::as_slice).collect();
                    let outer = outer_rank1(&w_refs)?;
                    let scaled = feats
                        .iter()
                        .zip(&ws)
                        .map(|(f, w)| f.scale_columns(w))
                        .collect::<Result<Vec<_>>>()?;
                    let rhs = tensor_multiply(&scaled)?;
                    let err1 = c
                        .data()
                        .iter()
                        .zip(outer.data())
                        .zip(rhs.data())
                        .map(|((a, w), b)| rel_err(a * w, *b))
                        .fold(0.0, f64::max);
                    report.record(err1, || format!("scaling: t={extents:?} d={d} seed={seed} err={err1:e}"));

                    let sums: Vec<Vec<f64>> = feats.iter().map(FeatureMatrix::row_sums).collect();
                    let factored: f64 = (0..d).map(|k| sums.iter().map(|s| s[k]).product::<f64>()).sum();
                    let err2 = rel_err(c.sum(), factored);
                    report.record(err2, || format!("sum: t={extents:?} d={d} seed={seed} err={err2:e}"));
                }
            }
        }
    }
    Ok(report)
}

/// Unit-contraction low-rank scores against the dense scores computed from
/// the reconstructed importance tensor, for every target and position.
pub fn equivalence(seeds: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::Equivalence);
    for n in [2, 3] {
        for seed in 0..seeds {
            let mut rng = stream(seed, 0xe9 + n as u64);
            let d = rand::Rng::random_range(&mut rng, 1..=8);
            let k = rand::Rng::random_range(&mut rng, 1..=3);
            let extents: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 1..=6)).collect();
            let feats: Vec<FeatureMatrix> = extents.iter().map(|&t| random_features(&mut rng, d, t)).collect();
            let c = tensor_multiply(&feats)?;
            for target in 0..n {
                let mut factors = RankFactors::init(&mut rng, target, k, &extents)?;
                for i in (0..n).filter(|&i| i != target) {
                    for w in factors.factors_of_mut(i) {
                        *w = uniform_vec(&mut rng, w.len(), -1.5, 1.5);
                    }
                }
                let low = lowrank_scores(&feats, &factors, &Contraction::Unit)?;
                let dense = scores_from_correlation(&c, &reconstruct_dense_weight(&factors)?, target)?;
                for (r, (a, b)) in low.iter().zip(&dense).enumerate() {
                    let err = rel_err(*a, *b);
                    report.record(err, || {
                        format!("n={n} t={extents:?} d={d} k={k} target={target} r={r} seed={seed}: {a} vs {b}")
                    });
                }
            }
        }
    }
    Ok(report)
}

/// Measured element counts against the closed forms over the default grid.
pub fn complexity() -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::Complexity);
    let grid = SweepGrid {
        runs: 0,
        ..SweepGrid::default()
    };
    let result = scaling_sweep(&grid)?;
    for r in result.reports.iter().filter(|r| !r.capped()) {
        let bad = r.counted != Some(r.predicted);
        report.record(f64::from(u8::from(bad)), || {
            format!("{} n={} t={} k={}: counted {:?}, predicted {}", r.mechanism, r.n(), r.t(), r.k, r.counted, r.predicted)
        });
    }
    Ok(report)
}

/// Desk shapes for the end-to-end gradient check.
pub fn gradient_cases() -> Vec<(&'static str, MafConfig)> {
    let base = MafConfig::default();
    vec![
        (
            "unary",
            MafConfig {
                mechanism: Mechanism::Unary,
                arities: ArityConfig::unary(),
                ..base.clone()
            },
        ),
        (
            "dense-hoca",
            MafConfig {
                mechanism: Mechanism::Hoca,
                arities: ArityConfig::new(&[3]).expect("valid arity"),
                dense_importance: true,
                ..base.clone()
            },
        ),
        (
            "lowrank-hoca",
            MafConfig {
                mechanism: Mechanism::Lowrank,
                arities: ArityConfig::new(&[3]).expect("valid arity"),
                ..base.clone()
            },
        ),
        (
            "maf-ubt",
            MafConfig {
                mechanism: Mechanism::Lowrank,
                arities: ArityConfig::all(),
                ..base
            },
        ),
    ]
}

/// Central-difference check of the teacher-forced caption loss with respect
/// to every parameter, at hidden 8, d 4, `t_i ≤ 4`, vocabulary 8.
pub fn gradient_check(name: &str, maf: &MafConfig, seed: u64) -> Result<(f64, String)> {
    let shape = DataShape {
        d_raw: vec![4, 3, 4],
        extents: vec![2, 3, 4],
        vocab: 8,
    };
    let config = ModelConfig {
        maf: maf.clone(),
        hidden: 8,
        encoder_hidden: 2,
        embed: 4,
        common: 4,
        fusion_attention: 4,
        dropout: 0.0,
    };
    let model = Captioner::new(&config, &shape, seed)?;
    let mut rng = stream(seed, 0x94ad);
    let features: Vec<FeatureMatrix> = shape
        .d_raw
        .iter()
        .zip(&shape.extents)
        .map(|(&d, &t)| random_features(&mut rng, d, t))
        .collect();
    let caption = [5, 7, 4, 0];
    let mut store = model.store.clone();
    let ids = store.trainable_ids();
    let check = finite_diff_check(&mut store, &ids, DEFAULT_EPS, |s, g| model.loss_node(g, s, &features, &caption, None))?;
    let worst = check.worst.map(|(p, i)| format!("{name}: worst {p}[{i}]")).unwrap_or_default();
    Ok((check.max_rel_error, worst))
}

pub fn gradients() -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::Gradients);
    for (name, maf) in gradient_cases() {
        let (err, worst) = gradient_check(name, &maf, 1)?;
        report.record(err, || format!("{worst} err={err:e}"));
    }
    Ok(report)
}

/// Small planted dataset and model used by the unary-equivalence check.
pub fn unary_setup(seed: u64) -> Result<(crate::captioner::SyntheticDataset, ModelConfig, TrainConfig)> {
    let ds = synth_dataset(
        seed,
        &DatasetSpec {
            n_items: 40,
            ..DatasetSpec::default()
        },
    )?;
    let model = ModelConfig {
        hidden: 8,
        encoder_hidden: 4,
        embed: 4,
        common: 4,
        fusion_attention: 4,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs: 3,
        batch_size: 8,
        adam: AdamConfig {
            lr: 5e-3,
            ..AdamConfig::default()
        },
        seed,
    };
    Ok((ds, model, train))
}

/// `mechanism = unary` and `mechanism = lowrank, arities = {1}` must give
/// bit-identical loss curves and final parameters.
pub fn unary_equivalence(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::Unary);
    let (ds, base, tc) = unary_setup(seed)?;
    let tr: Vec<&Item> = ds.split(Split::Train).collect();
    let va: Vec<&Item> = ds.split(Split::Val).collect();
    let run = |mechanism| -> Result<(Vec<u64>, Captioner)> {
        let mut cfg = base.clone();
        cfg.maf.mechanism = mechanism;
        cfg.maf.arities = ArityConfig::unary();
        let mut m = Captioner::new(&cfg, &ds.data_shape(), seed)?;
        let curve = train(&mut m, &tr, &va, &tc)?;
        let bits = curve
            .iter()
            .flat_map(|r| [r.train_loss.to_bits(), r.val_loss.to_bits(), r.val_token_acc.to_bits()])
            .collect();
        Ok((bits, m))
    };
    let (a, ma) = run(Mechanism::Unary)?;
    let (b, mb) = run(Mechanism::Lowrank)?;
    let diff = a.iter().zip(&b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len());
    report.record(diff as f64, || format!("{diff} curve values differ"));
    for ((_, pa), (_, pb)) in ma.store.iter().zip(mb.store.iter()) {
        let same = pa.name == pb.name && pa.value == pb.value;
        report.record(f64::from(u8::from(!same)), || format!("parameter {} differs", pa.name));
    }
    if ma.store.len() != mb.store.len() {
        report.record(1.0, || "parameter counts differ".into());
    }
    Ok(report)
}

pub fn random_model(seed: u64, vocab: usize) -> Result<(Captioner, Vec<FeatureMatrix>)> {
    let mut rng = stream(seed, 0xbea0);
    let extents: Vec<usize> = (0..3).map(|_| rand::Rng::random_range(&mut rng, 1..=4)).collect();
    let shape = DataShape {
        d_raw: vec![3; 3],
        extents: extents.clone(),
        vocab,
    };
    let config = ModelConfig {
        hidden: 6,
        encoder_hidden: 3,
        embed: 4,
        common: 4,
        fusion_attention: 4,
        ..ModelConfig::default()
    };
    let mut model = Captioner::new(&config, &shape, seed)?;
    // Spread the output logits so the search has real choices to make.
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.get(id).name.starts_with("out.") {
            let p = model.store.get_mut(id);
            let v = uniform_vec(&mut rng, p.value.len(), -3.0, 3.0);
            p.value.data_mut().copy_from_slice(&v);
        }
    }
    let feats = extents.iter().map(|&t| random_features(&mut rng, 3, t)).collect();
    Ok((model, feats))
}

/// Width-1 beam equals greedy on `greedy_cases` random models; a beam at
/// least as wide as `V^max_len` equals exhaustive enumeration at `V = 4`,
/// `max_len = 3` on `exhaustive_cases` more.
pub fn beam(greedy_cases: u64, exhaustive_cases: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(Suite::Beam);
    for seed in 0..greedy_cases {
        let (model, feats) = random_model(seed, 8)?;
        let params = model.snapshot()?;
        let dec = ItemDecoder::new(&params, &feats)?;
        let g = greedy_decode(&dec, 6)?;
        let b = beam_decode(&dec, 1, 6)?;
        report.record(f64::from(u8::from(g != b.tokens)), || format!("seed {seed}: greedy {g:?} vs beam {:?}", b.tokens));
    }
    for seed in 0..exhaustive_cases {
        let (model, feats) = random_model(1000 + seed, 4)?;
        let params = model.snapshot()?;
        let dec = ItemDecoder::new(&params, &feats)?;
        let b = beam_decode(&dec, 64, 3)?;
        let e = enumerate_best(&dec, 3)?;
        let same = b.tokens == e.tokens && b.log_prob == e.log_prob;
        report.record(f64::from(u8::from(!same)), || {
            format!("seed {seed}: beam {:?} ({}) vs enumeration {:?} ({})", b.tokens, b.log_prob, e.tokens, e.log_prob)
        });
    }
    Ok(report)
}

/// Runs the given suites (all when `None`).
pub fn run_suites(filter: Option<Suite>) -> Result<Vec<SuiteReport>> {
    match filter {
        Some(s) => Ok(vec![s.run()?]),
        None => Suite::ALL.into_iter().map(Suite::run).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
        }
        assert!("nonexistent".parse::<Suite>().is_err());
    }

    #[test]
    fn tuples_cover_the_grid() {
        assert_eq!(tuples(&[1, 2, 3, 5], 3).len(), 64);
        assert_eq!(tuples(&[1, 2], 0), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn small_suites_pass() {
        assert!(propositions(1).unwrap().passed());
        assert!(equivalence(5).unwrap().passed());
        assert!(beam(3, 2).unwrap().passed());
    }

    #[test]
    fn nan_errors_fail() {
        let mut r = SuiteReport::new(Suite::Propositions);
        r.record(f64::NAN, || "nan".into());
        assert!(!r.passed());
    }
}
